"""Exception types raised across the package."""


class DfrError(Exception):
    """Base class for all package errors."""


class DomainError(DfrError, ValueError):
    """Input lies outside the supported domain (e.g. time outside [0, 1])."""


class InvalidOrderError(DfrError, ValueError):
    """Derivative order exceeds the smoothness of the basis."""


class IllConditionedBasisError(DfrError, ArithmeticError):
    """Gram matrix is singular or numerically degenerate."""


class NumericalSingularityError(DfrError, ArithmeticError):
    """A covariance matrix stayed singular after jitter."""

    def __init__(self, message, subject=None):
        if subject is not None:
            message = f"subject {subject}: {message}"
        super().__init__(message)
        self.subject = subject


class DesignRankError(DfrError, ValueError):
    """Design matrix is not of full column rank, or leaves no residual dimension."""


class InvalidStateError(DfrError, ValueError):
    """An operation was called on an incomplete or empty state."""


class ValidationError(DfrError, ValueError):
    """Malformed user input: configuration or data files."""
