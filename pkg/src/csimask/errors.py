"""Exception hierarchy. The CLI maps each class to a distinct exit code."""


class CsiError(Exception):
    exit_code = 1


class ConfigError(CsiError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    pass


class DataFormatError(CsiError, IOError):
    exit_code = 3


class NumericalError(CsiError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericalError):
    pass
