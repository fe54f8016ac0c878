"""Filter-or-explore control loop with a sampling schedule sized to recover
feasibility before the barrier reaches zero.

While the robust constraint set is nonempty the nominal input is projected
onto it. Once it empties, the controller fixes a sampling interval, and at
every sampling instant applies the optimistic (UCB) input, holds it for one
interval, records a noisy derivative measurement and refits, until the set
is nonempty again.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .cbf import CbfSpec
from .errors import BudgetExhausted, ContractViolation, SafetyViolated, SolverFailure
from .gp import GpModel
from .socp import (
    INFEASIBLE_TOL,
    SocConstraintData,
    assemble_from_posterior,
    feasibility_margin,
    max_min_margin,
    solve_safety_filter,
    ucb_maximize,
)

log = logging.getLogger(__name__)


class Mode(enum.IntEnum):
    FILTERING = 0
    EXPLORING = 1


@dataclass
class BudgetConstants:
    """Constants entering the sample-budget bound (one C_i and noise level per output)."""

    C: Sequence[float]
    C_beta: float
    eps: float
    L_h: float
    n: int
    m: int
    noise_std: Sequence[float]

    def __post_init__(self):
        vals = [self.C_beta, self.eps, self.L_h, self.n, self.m, *self.C, *self.noise_std]
        if min(vals) <= 0:
            raise ContractViolation("budget constants must be strictly positive")
        if len(self.C) != len(self.noise_std):
            raise ContractViolation("need one C_i per noise level")


def compute_psi(k: BudgetConstants) -> float:
    s = np.asarray(k.noise_std, dtype=float)
    return float(np.sum(4.0 * k.L_h * k.C_beta * np.asarray(k.C) / np.log1p(s**-2)))


def compute_eta(k: BudgetConstants) -> float:
    d = 3.0 * (k.n + k.m + 1)
    return float((compute_psi(k) / k.eps) ** (-2.0 / d) / d)


def compute_delta_n(eta: float, N: int) -> int:
    """Smallest integer >= (log N - log eta) / eta, at least 1."""
    if N < 1:
        raise ContractViolation("N must be at least 1")
    return max(1, math.ceil((math.log(N) - math.log(eta)) / eta))


def lemma7_threshold(a: float, b: float) -> float:
    return 2.0 / a * (math.log(b) - math.log(a / 2.0))


def lemma7_check(a: float, b: float, lam: float) -> bool:
    """Whether ``lam`` clears the threshold beyond which exp(a lam) >= b (1 + lam) is claimed."""
    if a <= 0 or b <= 0:
        raise ContractViolation("a and b must be positive")
    return lam >= lemma7_threshold(a, b)


def compute_delta_t(spec: CbfSpec, xdot_bound: float, x, delta_n: int) -> float:
    """Sampling interval h(x) / (M_grad * M_xdot * dN)."""
    hx = spec.h(np.asarray(x, dtype=float))
    if hx <= 0:
        raise SafetyViolated(f"exploration would start at h = {hx:.3g} <= 0")
    if delta_n < 1:
        raise ContractViolation("delta_n must be at least 1")
    return hx / (spec.grad_bound * xdot_bound * delta_n)


def random_explore_baseline(lo, hi, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))


@dataclass
class ControllerState:
    mode: Mode = Mode.FILTERING
    N: int = 0
    q: int = 0
    budget: int = 0
    dt_sample: float = 0.0
    t_infeasible: float = 0.0
    held_input: Optional[np.ndarray] = None
    rr_index: int = 0
    pending: Optional[tuple] = None  # (x, u, y) awaiting the end of its hold
    episodes: int = 0


@dataclass
class ControllerConfig:
    dt_mode: str = "fixed"  # "fixed" or "theorem"
    fixed_dt: float = 1e-3
    delta_n: int = 10000
    control_dt: float = 1e-3
    explorer: str = "ucb"  # "ucb" or "random"
    beta_override: Optional[float] = None

    def __post_init__(self):
        if self.dt_mode not in ("fixed", "theorem"):
            raise ContractViolation(f"unknown dt_mode {self.dt_mode!r}")
        if self.explorer not in ("ucb", "random"):
            raise ContractViolation(f"unknown explorer {self.explorer!r}")


@dataclass
class StepRecord:
    u: np.ndarray
    hold: float
    mode: Mode
    feasible: bool
    slacks: np.ndarray
    margin: float
    beta: float
    N: int
    sampled: bool = False


class Controller:
    """Stateful wrapper around the filter/explore logic for one trajectory.

    ``measure(x, u)`` must return a noisy derivative measurement; it stands in
    for the plant interface and is only called at sampling instants.
    """

    def __init__(
        self,
        model: GpModel,
        specs: Sequence[CbfSpec],
        lo,
        hi,
        nominal: Callable[[np.ndarray], np.ndarray],
        measure: Callable[[np.ndarray, np.ndarray], np.ndarray],
        xdot_bound: float,
        config: ControllerConfig = ControllerConfig(),
        rng: Optional[np.random.Generator] = None,
    ):
        self.model = model
        self.specs = list(specs)
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.nominal = nominal
        self.measure = measure
        self.xdot_bound = xdot_bound
        self.cfg = config
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.state = ControllerState(N=model.N, budget=config.delta_n)
        self._last_u = None

    # helpers -----------------------------------------------------------------
    def beta(self) -> float:
        if self.cfg.beta_override is not None:
            return self.cfg.beta_override
        return self.model.beta_max()

    def constraints(self, x) -> List[SocConstraintData]:
        ap = self.model.affine_posterior(x)
        self._beta = b = self.beta()
        return [assemble_from_posterior(ap, s, x, b) for s in self.specs]

    def sampling_interval(self, x) -> float:
        if self.cfg.dt_mode == "fixed":
            return self.cfg.fixed_dt
        return min(compute_delta_t(s, self.xdot_bound, x, max(self.state.budget, 1)) for s in self.specs)

    def _explore_input(self, cons, x) -> np.ndarray:
        if self.cfg.explorer == "random":
            return random_explore_baseline(self.lo, self.hi, self.rng)
        k = self.state.rr_index % len(self.specs)
        self.state.rr_index += 1
        return ucb_maximize(cons[k], self.lo, self.hi)

    def _take_sample(self, x, t, cons) -> StepRecord:
        cs = self.state
        if cs.q >= cs.budget:
            raise BudgetExhausted(f"sample budget exhausted after {cs.q} samples at t={t:.4f}")
        cs.q += 1
        u = self._explore_input(cons, x)
        cs.held_input = u
        cs.pending = (np.array(x, dtype=float), u.copy(), np.asarray(self.measure(x, u), dtype=float))
        slacks = np.array([c.slack(u) for c in cons])
        return StepRecord(u, cs.dt_sample, Mode.EXPLORING, False, slacks, np.nan, self._beta, self.model.N, True)

    def _recheck(self, cons, u_nom) -> float:
        """Sign-exact stand-in for the joint margin.

        Cheap certificates first: one constraint alone being infeasible, or a
        candidate input satisfying all of them. The full max-min problem is
        solved only when neither applies.
        """
        cands = [u_nom]
        worst = np.inf
        for c in cons:
            fm, u = feasibility_margin(c, self.lo, self.hi)
            worst = min(worst, fm)
            cands.append(u)
        if worst < -INFEASIBLE_TOL or len(cons) == 1:
            return worst
        best = max(min(c.slack(u) for c in cons) for u in cands)
        if best >= 0:
            return best
        return max_min_margin(cons, self.lo, self.hi)[0]

    # main entry --------------------------------------------------------------
    def step(self, x, t: float) -> StepRecord:
        """Decide the input to hold from time ``t``; the caller integrates for ``record.hold``."""
        cs = self.state
        x = np.asarray(x, dtype=float)
        if cs.mode == Mode.EXPLORING:
            px, pu, py = cs.pending
            self.model.add_measurement(px, pu, py)
            cs.pending = None
            cons = self.constraints(x)
            margin = self._recheck(cons, np.asarray(self.nominal(x), dtype=float))
            if margin < -INFEASIBLE_TOL:
                return self._take_sample(x, t, cons)
            cs.N += cs.q
            cs.budget -= cs.q
            log.debug("t=%.4f feasibility recovered after %d samples", t, cs.q)
            cs.q = 0
            cs.mode = Mode.FILTERING
        else:
            cons = self.constraints(x)

        u_nom = np.asarray(self.nominal(x), dtype=float)
        try:
            res = solve_safety_filter(cons, self.lo, self.hi, u_nom, warm_start=self._last_u)
        except SolverFailure as e:
            log.warning("t=%.4f %s; applying best iterate", t, e)
            u = e.best
            return StepRecord(
                u, self.cfg.control_dt, Mode.FILTERING, True,
                np.array([c.slack(u) for c in cons]), np.nan, self._beta, self.model.N,
            )
        if res.feasible:
            self._last_u = res.u
            slacks = np.array([c.slack(res.u) for c in cons])
            return StepRecord(
                res.u, self.cfg.control_dt, Mode.FILTERING, True, slacks, res.margin, self._beta, self.model.N
            )
        cs.mode = Mode.EXPLORING
        cs.episodes += 1
        cs.q = 0
        cs.t_infeasible = t
        cs.dt_sample = self.sampling_interval(x)
        log.debug("t=%.4f infeasible (margin %.3g), dt=%.3g", t, res.margin, cs.dt_sample)
        rec = self._take_sample(x, t, cons)
        rec.margin = res.margin
        return rec
