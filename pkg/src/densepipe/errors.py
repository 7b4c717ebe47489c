"""Exception hierarchy shared by every densepipe module."""


class PipelineError(Exception):
    """Base class for all densepipe errors."""


class ShapeError(PipelineError, ValueError):
    """Tensor extents do not agree.

    ``axis`` names the offending axis when one can be singled out.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ParameterError(PipelineError, ValueError):
    pass


class DegenerateBatchError(PipelineError, ValueError):
    pass


class ConfigError(PipelineError, ValueError):
    pass


class DataError(PipelineError, ValueError):
    pass


class ImageFormatError(DataError):
    pass


class TrainingAborted(PipelineError, RuntimeError):
    pass


class CheckpointError(PipelineError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


class LayerNotFoundError(PipelineError, KeyError):
    pass


class ConfigFileError(ConfigError):
    """Config file missing or unreadable."""


class UnknownKeyError(ConfigError):
    def __init__(self, key):
        super().__init__(f"unknown config key: {key!r}")
        self.key = key


class ConfigValueError(ConfigError):
    def __init__(self, key, value, reason=""):
        msg = f"cannot parse value {value!r} for key {key!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.key = key
        self.value = value


class ImageTruncatedError(ImageFormatError):
    pass


class ImageDimensionError(ImageFormatError):
    pass
