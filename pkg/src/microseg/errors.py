"""Exception hierarchy.

Every error raised by the package derives from :class:`MicrosegError`. The
three intermediate classes decide the CLI exit code.
"""


class MicrosegError(Exception):
    exit_code = 2


class UsageError(MicrosegError):
    exit_code = 1


class DataError(MicrosegError):
    exit_code = 2


class NumericalError(MicrosegError):
    exit_code = 3


class ConfigError(UsageError):
    pass


class DimensionError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class InvalidTraitError(DataError):
    pass


class EmptyWindowError(DataError):
    pass


class SchemaError(DataError):
    pass


class StageOrderError(DataError):
    pass


class CacheError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DegenerateTrajectoryError(NumericalError):
    pass
