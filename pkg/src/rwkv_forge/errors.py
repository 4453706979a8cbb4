"""Exception hierarchy shared by every rwkv_forge module."""


class RwkvError(Exception):
    """Base class for all library errors."""


class DimensionError(RwkvError, ValueError):
    pass


class EmptySequenceError(RwkvError, ValueError):
    pass


class NumericError(RwkvError, ArithmeticError):
    pass


class ParameterError(RwkvError, ValueError):
    pass


class VocabularyError(RwkvError, ValueError):
    pass


class DegenerateInputError(RwkvError, ValueError):
    pass


class DegenerateDecayError(RwkvError, ValueError):
    """Decay rate <= 0: the effective context is unbounded."""


class CheckpointError(RwkvError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointManifestError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class ConfigError(RwkvError, ValueError):
    pass
