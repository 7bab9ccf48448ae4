"""Exception hierarchy.  ``exit_code`` is what the CLI returns."""


class CersError(Exception):
    exit_code = 1


class ConfigError(CersError):
    exit_code = 2


class DataError(CersError, ValueError):
    exit_code = 3


class NumericError(CersError, ArithmeticError):
    exit_code = 4


class NoBimodalityError(DataError):
    """Raised when a threshold is requested for constant data."""
