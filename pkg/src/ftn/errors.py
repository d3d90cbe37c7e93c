"""Exception hierarchy.

Each leaf maps onto one CLI exit code (see :mod:`ftn.cli`).
"""


class FTNError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(FTNError, ValueError):
    """Invalid shapes, hyperparameters or configuration keys."""


class CapacityError(ConfigError):
    """Static disjoint blocks ran out of grid slots."""


class UsageError(FTNError, RuntimeError):
    """An API was called in a state where it cannot work (stale cache, missing mask, ...)."""


class DataError(FTNError):
    exit_code = 2


class IngestionError(DataError):
    def __init__(self, message, path=None, offset=None):
        where = ""
        if path is not None:
            where = f" [{path}"
            if offset is not None:
                where += f" @ byte {offset}"
            where += "]"
        super().__init__(message + where)
        self.path = path
        self.offset = offset


class FetchError(DataError):
    pass


class IntegrityError(DataError):
    pass


class AggregationError(DataError):
    pass


class NumericalError(FTNError, ArithmeticError):
    exit_code = 3
