"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation-type errors exit 1,
scheme/numeric errors exit 2.
"""


class MCSSError(Exception):
    """Base class for all library errors."""


class ValidationError(MCSSError, ValueError):
    """Inputs are inconsistent (shapes, adaptedness, grid mismatch)."""


class ConfigurationError(ValidationError):
    """A problem or run configuration is incomplete or malformed."""


class DomainError(ValidationError):
    """An argument lies outside the domain of an operation."""


class DimensionError(ValidationError):
    """Vector arguments have mismatched lengths."""


class SchemeError(MCSSError, ArithmeticError):
    """A discretization precondition failed (CFL, Picard, size guard)."""

    def __init__(self, message, max_dt=None):
        super().__init__(message)
        self.max_dt = max_dt


class NumericError(SchemeError):
    """A coefficient or solution produced a non-finite value."""
