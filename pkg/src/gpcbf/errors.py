"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """Raised when an argument breaks an operation's precondition."""


class BudgetExhausted(RuntimeError):
    """The sample budget ran out while the filter was still infeasible."""


class SafetyViolated(RuntimeError):
    """An exploration episode was asked to start outside the safe interior."""


class IntegrationDiverged(RuntimeError):
    """The integrator produced a non-finite state."""


class SolverFailure(RuntimeError):
    """The safety-filter solver did not converge.

    ``best`` holds the best iterate found before giving up.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
