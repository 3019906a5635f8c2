"""Exception types shared across the package."""


class TracerNetError(Exception):
    """Base class for all package errors."""


class ShapeError(TracerNetError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(TracerNetError, ValueError):
    """Invalid model, simulation or experiment configuration."""


class NonFiniteError(TracerNetError, FloatingPointError):
    """A gradient or loss became NaN or infinite."""


class CheckpointError(TracerNetError, IOError):
    """Base class for persisted-file problems."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError, ShapeError):
    pass


class PipelineError(TracerNetError, RuntimeError):
    """A CLI stage cannot run, usually because an upstream artifact is missing."""
