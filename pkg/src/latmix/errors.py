"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class ValidationError(ValueError):
    """Input values violate a documented precondition."""


class ConditioningError(RuntimeError):
    """A linear-algebra step failed due to an ill-conditioned matrix."""

    def __init__(self, message, smallest_eigenvalue=None):
        if smallest_eigenvalue is not None:
            message = f"{message} (smallest eigenvalue ~ {smallest_eigenvalue:.3e})"
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


class IngestionError(ValueError):
    """A dataset file or record cannot be ingested."""


class GenerationError(RuntimeError):
    """A synthetic-data configuration cannot produce a valid cohort."""


class OptimizationFailure(RuntimeError):
    """An optimizer produced an inconsistent result (e.g. full fit worse than reduced)."""
