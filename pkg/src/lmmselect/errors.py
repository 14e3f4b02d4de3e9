"""Exception hierarchy shared across the package.

Split into validation-type errors (bad inputs, guard violations; CLI exit
code 2) and numerical errors (singular systems, failed optimizations,
starved samplers; CLI exit code 3).
"""


class LmmSelectError(Exception):
    """Base class for all package errors."""


class ValidationError(LmmSelectError):
    """Invalid user input: malformed data, bad configuration, bad flags."""


class ParameterDomainError(ValidationError):
    """Variance parameters outside their domain (non-PSD G, sigma^2 <= 0)."""


class FeasibilityError(ValidationError):
    """A dimensional guard was violated (e.g. p above a method's limit)."""

    def __init__(self, message: str, guard: str = ""):
        super().__init__(message)
        self.guard = guard


class ParseError(ValidationError):
    """Malformed delimited input; carries the offending row when known."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class NumericalError(LmmSelectError):
    """Base class for runtime numerical failures."""


class SingularityError(NumericalError):
    """A matrix that must be positive definite failed to factor."""


class SingularDesignError(NumericalError):
    """Rank-deficient design over the requested columns."""

    def __init__(self, message: str, columns: tuple[int, ...] = ()):
        super().__init__(message)
        self.columns = columns


class ConvergenceError(NumericalError):
    """Iterative solver exhausted its budget; carries the best iterate."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class DegenerateVarianceError(NumericalError):
    """A Wald statistic was requested for a zero-variance coefficient."""


class InsufficientAcceptanceError(NumericalError):
    """Too few Monte Carlo samples landed in the selection event."""

    def __init__(self, message: str, acceptance_rate: float = 0.0, accepted: int = 0):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate
        self.accepted = accepted


class UnboundedIntervalError(NumericalError):
    """Confidence-bound search never crossed its target level."""

    def __init__(self, message: str, attained: float = float("nan")):
        super().__init__(message)
        self.attained = attained
