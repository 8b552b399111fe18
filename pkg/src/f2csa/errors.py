"""Exception types shared across the solvers."""


class SolverError(RuntimeError):
    """An iterative solver failed to reach its target accuracy."""

    def __init__(self, message: str, best_residual: float | None = None):
        super().__init__(message)
        self.best_residual = best_residual


class DivergenceError(SolverError):
    """Residuals grew instead of shrinking; step sizes are too large."""


class NonconvexPenaltyError(ValueError):
    """The assembled penalty is not strongly convex in y (alpha too large)."""


class DegenerateActiveSetError(ValueError):
    """A constraint is weakly active: both its slack and multiplier are tiny."""


class LicqError(ValueError):
    """Active constraint rows are rank deficient."""
