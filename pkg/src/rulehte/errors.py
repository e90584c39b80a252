"""Exception types.  The CLI maps each family to its own exit code."""


class RuleHTEError(Exception):
    exit_code = 1


class ConfigError(RuleHTEError, ValueError):
    exit_code = 2


class DataError(RuleHTEError, ValueError):
    exit_code = 3


class NumericalError(RuleHTEError, ArithmeticError):
    exit_code = 4
