"""Exception types shared across the package."""


class VolrepError(Exception):
    pass


class ShapeMismatchError(VolrepError):
    pass


class NumericError(VolrepError):
    pass


class DegenerateVectorError(VolrepError):
    pass


class EmptyReportError(VolrepError):
    pass


class CorruptCheckpointError(VolrepError):
    pass


class CheckpointVersionError(VolrepError):
    pass
