class AvatarRuntimeError(Exception):
    """Root of every error raised by the runtime."""


class ValidationError(AvatarRuntimeError, ValueError):
    """Bad input, bad file or bad configuration. CLI exit code 1."""


class RuntimeFailure(AvatarRuntimeError, RuntimeError):
    """Failure while executing an otherwise valid request. CLI exit code 2."""


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------

class ShapeError(ValidationError):
    pass


class NumericError(RuntimeFailure):
    """NaN/Inf reached a loss or gradient."""


class MaskError(ValidationError):
    """A query row has no allowed key."""


class RopeError(ValidationError):
    pass


class LayoutError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------

class CacheOrderError(ValidationError):
    pass


class CacheConfigError(ValidationError):
    pass


class PositionCollisionError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# Audio tracks
# ---------------------------------------------------------------------------

class TrackFormatError(ValidationError):
    pass


class TrackMaskError(ValidationError):
    pass


class TrackLengthError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# Sampling / streaming
# ---------------------------------------------------------------------------

class ScheduleError(ValidationError):
    pass


class AudioExhaustedError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# Checkpoints / configuration
# ---------------------------------------------------------------------------

class CheckpointMagicError(ValidationError):
    pass


class CheckpointVersionError(ValidationError):
    pass


class CheckpointTruncatedError(ValidationError):
    pass


class ConfigMismatchError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass
