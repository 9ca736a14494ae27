"""Exception hierarchy shared by every service module.

Each error carries the process exit code the CLI maps it to.
"""

from typing import Sequence


class PuqError(RuntimeError):
    """Base class for all recoverable failures raised by the package."""

    exit_code: int = 2


class UsageError(PuqError):
    """Raised for unknown flags, subcommands or missing arguments."""

    exit_code = 1


class InputError(PuqError):
    """Raised when caller-supplied data violates an operation's contract."""


class ShapeError(InputError):
    """Raised on dimension mismatches between arrays, layers or taps."""


class DomainError(InputError):
    """Raised when a special function is evaluated outside its domain."""


class ConfigurationError(PuqError):
    """Raised for configurations that cannot be realized."""


class ConfigValidationError(ConfigurationError):
    """Raised with every violated field of a run configuration."""

    def __init__(self, errors: Sequence[str]) -> None:
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) or "invalid configuration")


class FormatError(PuqError):
    """Raised when a binary or JSON artifact cannot be decoded."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericError(PuqError):
    """Raised when a computation produces non-finite values."""

    exit_code = 3


class DegenerateMetricError(PuqError):
    """Raised when a ranking metric is undefined for the given labels."""

    exit_code = 4
