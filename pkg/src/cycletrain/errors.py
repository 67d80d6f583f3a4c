"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every failure a user can
trigger should surface as one of them.
"""


class CycleTrainError(Exception):
    """Base class for all package errors."""


class ShapeError(CycleTrainError, ValueError):
    """An input or parameter has the wrong shape for the layer consuming it."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"{layer}: {message}"
        super().__init__(message)
        self.layer = layer


class NonFiniteError(CycleTrainError, FloatingPointError):
    """NaN or Inf showed up in an activation, gradient or parameter update."""

    def __init__(self, message, layer_index=None, name=None):
        super().__init__(message)
        self.layer_index = layer_index
        self.name = name


class BackwardError(CycleTrainError, RuntimeError):
    """backward() called without a matching forward()."""


class ConfigError(CycleTrainError, ValueError):
    """Invalid hyperparameter or plan value."""


class DataError(CycleTrainError):
    """Dataset could not be read or is structurally invalid."""


class CheckpointError(CycleTrainError):
    """Checkpoint file is malformed, truncated or incompatible.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
