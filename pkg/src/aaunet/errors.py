"""Exception types shared across the package."""


class AAUNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AAUNetError):
    """A tensor has the wrong rank or a mismatched axis."""


class ConfigError(AAUNetError):
    """An invalid configuration value or combination."""


class DataError(AAUNetError):
    """Bad data content (out-of-range class index, corrupt mask values)."""


class GenerationError(AAUNetError):
    """Phantom generation failed (impossible recipe, class coverage)."""


class CheckpointError(AAUNetError):
    """Unreadable checkpoint or checkpoint/config mismatch."""


class GradCheckError(AAUNetError):
    """Gradient checking hit a hard failure (non-finite gradients)."""


class NonFiniteGradient(AAUNetError):
    """An optimizer step was rejected because a gradient was not finite."""


class TrainingAborted(AAUNetError):
    """Training stopped on a non-finite loss; the last good checkpoint is kept."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
