"""Exception hierarchy shared across the package."""


class GaitglError(Exception):
    """Base class for all package errors."""


class DimensionError(GaitglError):
    """Tensor extents incompatible with the requested operation."""


class DomainError(GaitglError):
    """Input values outside the mathematical domain of an operation."""


class GradientError(GaitglError):
    """Backward-pass contract violated (e.g. backward on a non-scalar)."""


class ConfigurationError(GaitglError):
    """Invalid layer/network/run configuration."""


class InputError(GaitglError):
    """Malformed caller-supplied data (labels, metadata, ...)."""


class FrameRejected(GaitglError):
    """A silhouette frame has no foreground and cannot be normalized."""


class DatasetError(GaitglError):
    """Dataset cannot be loaded or is structurally empty."""


class SamplingError(GaitglError):
    """Batch composition impossible for the given dataset/spec."""


class DegenerateBatchError(GaitglError):
    """A batch contains no valid (anchor, positive, negative) triplet."""


class CheckpointError(GaitglError):
    """Checkpoint file corrupt, truncated or incompatible."""


class TrainingDiverged(GaitglError):
    """Non-finite loss encountered; carries a diagnostic report."""

    def __init__(self, message, iteration=None, report=None):
        super().__init__(message)
        self.iteration = iteration
        self.report = report or {}
