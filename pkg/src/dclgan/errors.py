"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class DCLError(Exception):
    exit_code = 1


class ConfigError(DCLError, ValueError):
    exit_code = 2


class DataError(DCLError):
    exit_code = 3


class NumericalError(DCLError, ArithmeticError):
    exit_code = 4


class CheckpointError(DCLError):
    """Corrupt, unreadable or incompatible checkpoint file."""

    exit_code = 3
