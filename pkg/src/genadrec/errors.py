"""Error taxonomy shared across the package.

Exit-code mapping for the CLI lives in cli.py: ConfigError -> 2,
DataError / InvalidInputError / DecodeFailureError -> 3,
NumericalFailureError -> 4.
"""


class InvalidInputError(ValueError):
    """An operation received inputs violating its preconditions."""


class DecodeFailureError(RuntimeError):
    """Decoding reached a dead end (names the offending prefix)."""


class NumericalFailureError(ArithmeticError):
    """A loss or gradient became non-finite (names the offending component)."""


class ConfigError(Exception):
    """Experiment configuration is missing or inconsistent."""


class DataError(Exception):
    """An input file is missing, malformed, or inconsistent."""
