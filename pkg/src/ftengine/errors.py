"""Exception types raised across the engine.

Every failure mode callers are expected to distinguish gets its own class;
everything derives from EngineError so the CLI can map any engine failure
to a single nonzero exit code.
"""


class EngineError(Exception):
    pass


class ShapeMismatchError(EngineError):
    """Operand shapes are inconsistent with each other or with the network."""


class InvalidHyperparameterError(EngineError):
    """A kernel or layer hyperparameter violates its precondition."""


class InvalidRateError(InvalidHyperparameterError):
    """Dropout rate outside [0, 1)."""


class InvalidProfileError(EngineError):
    """Architecture profile fields are inconsistent."""


class ShapeUnderflowError(EngineError):
    """Input too small to survive the network's pooling stages."""


class DetachedGraphError(EngineError):
    """backward() was asked for a loss that is not on the tape."""


class UnknownParameterError(EngineError):
    """Optimizer received a gradient for a parameter the network lacks."""


class UnknownKindError(EngineError):
    """Unrecognized optimizer kind."""


class UnknownLayerError(EngineError):
    """Named layer does not exist in the network."""


class CheckpointError(EngineError):
    pass


class CorruptFileError(CheckpointError):
    """Checkpoint magic or CRC mismatch, or truncated payload."""


class MissingTensorError(CheckpointError):
    """Strict apply requires a tensor the checkpoint does not hold."""


class UnsupportedFormatError(EngineError):
    """Image bytes are not binary PPM (P6) with maxval 255."""


class TruncatedFileError(EngineError):
    """Image payload shorter than the header promises."""


class PixelRangeError(EngineError):
    """Raw pixel values outside [0, 255]."""


class EmptyDatasetError(EngineError):
    """Dataset root holds no decodable class directories."""


class DatasetDecodeError(EngineError):
    """One or more files in a dataset tree failed to decode."""

    def __init__(self, failures):
        self.failures = list(failures)
        names = ", ".join(str(f) for f, _ in self.failures)
        super().__init__(f"failed to decode {len(self.failures)} file(s): {names}")


class BatchTooLargeError(EngineError):
    """Requested batch size exceeds the dataset size."""
