"""Exception hierarchy shared by every module.

All errors derive from ``ValueError`` so callers that only care about bad
input can catch the builtin.
"""


class SizingError(ValueError):
    """Base class for all package errors."""


class DomainError(SizingError):
    """An argument lies outside the mathematical domain of an operation."""


class InsufficientDataError(SizingError):
    """Too few observations to estimate the requested quantity."""


class ShapeError(SizingError):
    """Paired inputs have mismatched lengths."""


class InfeasibleDesignError(SizingError):
    """The requested design cannot be realised (e.g. implied rate outside (0, 1))."""


class DataValidationError(SizingError):
    """Input data failed validation; ``line`` is the 1-based file line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
