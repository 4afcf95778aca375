"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (config 2, data 3, numerical 4).
"""


class TabreconError(Exception):
    exit_code = 1


class ConfigError(TabreconError):
    exit_code = 2


class DataError(TabreconError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class StructureError(DataError):
    """Broken parent links, duplicate units, level mismatches."""


class ValidationError(DataError):
    """A field value outside its allowed range."""


class DomainError(DataError):
    """An observation that the perturbation model can never emit."""


class NumericalError(TabreconError, ArithmeticError):
    exit_code = 4
