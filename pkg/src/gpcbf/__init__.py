"""Safe online learning with GP-based control barrier functions.

A GP learns the control-affine dynamics online, a second-order-cone program
filters a nominal input, and an upper-confidence-bound rule drives data
collection whenever the filter has no feasible input.
"""
__version__ = "0.1.0"
