"""Exception categories.

The CLI maps each category to a distinct exit code, so modules raise the
most specific class that applies.
"""


class AlterEgoError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(AlterEgoError, ValueError):
    exit_code = 1


class DataError(AlterEgoError, ValueError):
    """Malformed, inconsistent or incomplete input data."""

    exit_code = 2


class NumericalError(AlterEgoError, ArithmeticError):
    """A numerical precondition failed (non-PSD matrix, improper policy, ...)."""

    exit_code = 3
