class BiofuseError(Exception):
    """Base class for all pipeline errors."""


class SamplingUndefined(BiofuseError):
    pass


class InvalidDevice(BiofuseError):
    pass


class InvalidKeycode(BiofuseError):
    pass


class EmptySequence(BiofuseError):
    pass


class ChannelMismatch(BiofuseError):
    pass


class ModelFormatError(BiofuseError):
    """Corrupt, truncated or wrong-version model file."""


class TrainingDiverged(BiofuseError):
    pass


class InsufficientData(BiofuseError):
    pass


class ConfigError(BiofuseError):
    pass
