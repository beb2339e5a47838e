"""
Error Types
Every failure raised by the toolkit derives from HedgingError and carries the
exit code the command-line front end maps it to.
"""

from typing import Optional


class HedgingError(Exception):
    """Base class for toolkit failures."""

    exit_code = 3


class ConfigurationError(HedgingError, ValueError):
    """Invalid run configuration or parameter record."""

    exit_code = 2

    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line = line
        self.key = key
        self.detail = message
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SizeLimitError(HedgingError, ValueError):
    """Problem too large for an exhaustive solver."""

    exit_code = 2


class UnsupportedFloorError(HedgingError, ValueError):
    """Nonzero floor claim requested from a backend without exact replication."""

    exit_code = 2


class NumericalError(HedgingError):
    """A numerical routine could not produce a trustworthy value."""

    exit_code = 3


class QuadratureFailure(NumericalError):
    pass


class NonFiniteError(QuadratureFailure):
    """Integrand produced NaN or infinity inside the integration window."""


class NoBracketError(NumericalError):
    pass


class MaxIterError(NumericalError):
    pass


class UnboundedError(NumericalError):
    """Requested level is above every value reachable by bracket growth."""


class OutOfRangeError(NumericalError, ValueError):
    pass


class TimeAtExpiryError(NumericalError, ValueError):
    pass


class InsufficientCapitalError(NumericalError, ValueError):
    """Initial capital cannot superhedge the floor claim."""


class OracleMismatchError(HedgingError):
    """Brute-force oracle disagrees with the closed-form solution."""

    exit_code = 4
