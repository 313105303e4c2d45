"""Exception hierarchy for the elattn package."""


class ElAttnError(Exception):
    """Base class for all errors raised by elattn."""


class ShapeError(ElAttnError, ValueError):
    """Raised when tensor dimensions do not line up."""


class EmptyContextError(ShapeError):
    """Raised when an attention context or prefix has no rows."""


class ParameterError(ElAttnError, ValueError):
    """Raised for an invalid scalar or configuration parameter."""


class NumericalError(ElAttnError, ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class StateError(ElAttnError, RuntimeError):
    """Raised when a decoder state, cache or mode does not match its use."""


class LengthError(ElAttnError, ValueError):
    """Raised when a sequence or position exceeds the model's max_positions."""


class ModeError(ElAttnError, ValueError):
    """Raised when an operation is used with the wrong model architecture."""


class InputError(ElAttnError, ValueError):
    """Raised for empty or malformed token input."""


class CheckpointError(ElAttnError, OSError):
    """Base class for checkpoint loading failures."""


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint magic bytes."""


class VersionMismatchError(CheckpointError):
    """The checkpoint format version is not supported."""


class TruncatedCheckpointError(CheckpointError):
    """The file ends before the header or tensor data is complete."""


class CheckpointShapeError(CheckpointError, ShapeError):
    """A stored tensor's shape disagrees with the shape implied by the config."""
