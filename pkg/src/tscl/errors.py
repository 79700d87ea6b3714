"""Exception hierarchy shared across the package."""


class TsclError(Exception):
    """Base class for all errors raised by tscl."""


# data
class DataError(TsclError):
    pass


class DatasetNotFound(DataError):
    pass


class MalformedFile(DataError):
    pass


class NonMonotonicTimestamps(DataError):
    pass


class EmptySeries(DataError):
    pass


class MissingValues(DataError):
    pass


class IrregularSampling(DataError):
    pass


class SplitTooSmall(DataError):
    pass


class SeriesTooShort(DataError):
    pass


# models / losses
class InvalidSpec(TsclError):
    pass


class ShapeMismatch(TsclError, ValueError):
    pass


class ZeroVector(TsclError, ValueError):
    pass


class NonPositiveTemperature(TsclError, ValueError):
    pass


class SegmentTooShort(TsclError, ValueError):
    pass


class EmptyQueueWithoutWarmup(TsclError):
    pass


class SingularSystem(TsclError):
    pass


class Divergence(TsclError):
    pass


class CheckpointMismatch(TsclError):
    pass


class CheckpointCorrupt(TsclError):
    pass


class NonDifferentiableHead(TsclError):
    pass


# experiment plumbing
class ConfigError(TsclError):
    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class MissingCell(TsclError):
    pass


class ConflictingCells(TsclError):
    pass
