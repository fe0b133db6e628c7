"""Exception hierarchy shared by all stages.

The CLI maps each class to a process exit code.
"""


class IvxError(Exception):
    exit_code = 1


class ConfigError(IvxError, ValueError):
    """Invalid parameters or inconsistent configuration."""

    exit_code = 2


class DataError(IvxError, ValueError):
    """Input data violates a precondition (shape, labels, emptiness)."""

    exit_code = 3


class FormatError(DataError):
    """Malformed or unsupported file contents."""


class NumericError(IvxError, ArithmeticError):
    """Numerical failure: divergence, non-finite values, non-SPD matrices."""

    exit_code = 4
