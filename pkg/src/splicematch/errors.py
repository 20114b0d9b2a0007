"""Exception hierarchy shared by all splicematch modules."""


class SpliceMatchError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SpliceMatchError):
    """Tensor or image shapes are incompatible with the requested operation."""


class ParameterError(SpliceMatchError):
    """An argument value is outside the operation's accepted range."""


class ValidationError(SpliceMatchError):
    """Input data violates a documented contract (e.g. non-one-hot masks)."""


class NumericError(SpliceMatchError):
    """A NaN or Inf appeared where only finite values are allowed."""


class MetricError(SpliceMatchError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class GenerationError(SpliceMatchError):
    """Dataset synthesis could not make progress within its retry budget."""


class TransformRejected(SpliceMatchError):
    """A sampled transform pushed the region off-canvas or out of the area
    bounds; the caller is expected to resample."""


class CheckpointError(SpliceMatchError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not supported."""


class CheckpointFormatError(CheckpointError):
    """The file is truncated or its header cannot be parsed."""


class CheckpointShapeError(CheckpointError):
    """A stored array's shape or dtype does not match its header entry."""
