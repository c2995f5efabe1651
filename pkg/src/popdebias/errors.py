"""Exception types. Each maps onto a CLI exit code."""


class PopDebiasError(Exception):
    exit_code = 1


class ConfigError(PopDebiasError, ValueError):
    exit_code = 1


class DataError(PopDebiasError, ValueError):
    exit_code = 2


class NumericalError(PopDebiasError, FloatingPointError):
    exit_code = 3
