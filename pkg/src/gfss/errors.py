"""Exception hierarchy shared by every module of the package."""


class GFSSError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GFSSError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(GFSSError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(GFSSError, ValueError):
    """A documented pre-condition of a call was violated."""


class ConfigError(GFSSError, ValueError):
    """Invalid or unknown configuration. ``key`` holds the dotted key path."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class IoError(GFSSError, OSError):
    """Reading or writing an artifact on disk failed."""


class DataError(GFSSError, ValueError):
    """Malformed data: out-of-range labels, truncated files and the like."""


class NumericalError(GFSSError, ArithmeticError):
    """Optimization diverged (non-finite or exploding loss)."""
