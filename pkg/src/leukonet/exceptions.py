"""Exception hierarchy. CLI exit codes are attached to the families that map to them."""


class LeukoNetError(Exception):
    exit_code = 1


class ConfigError(LeukoNetError, ValueError):
    exit_code = 2


class DataError(LeukoNetError, ValueError):
    exit_code = 3


class DivergenceError(LeukoNetError, FloatingPointError):
    exit_code = 4


class ShapeError(LeukoNetError, ValueError):
    pass


class ContractError(LeukoNetError, ValueError):
    pass


class RangeError(LeukoNetError, ValueError):
    pass


class SingularMatrixError(LeukoNetError, ValueError):
    pass


class DegenerateStatisticsError(LeukoNetError, ValueError):
    pass
