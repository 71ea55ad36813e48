"""Exception types raised across the package."""


class FlowPoseError(Exception):
    """Base class for all package-specific errors."""


class NonPositiveDepth(FlowPoseError):
    """A point to be projected (or a depth to lift) has z <= 0."""


class DegenerateBox(FlowPoseError):
    """A 2D box has non-positive width or height."""


class DimensionMismatch(FlowPoseError):
    """Grids or arrays that must share a shape do not."""


class DegenerateConfiguration(FlowPoseError):
    """3D points are too few, coincident, or collinear for a pose solve."""


class NumericalFailure(FlowPoseError):
    """A linear-algebra step failed or produced non-finite values."""


class TooFewCorrespondences(FlowPoseError):
    """Fewer correspondences than a solver's minimum."""


class NoConsensus(FlowPoseError):
    """RANSAC found no hypothesis with enough inliers."""


class InitializationBehindCamera(FlowPoseError):
    """An initial pose places the model at or behind the camera plane."""


class AllIterationsFailed(FlowPoseError):
    """No refinement iteration produced a usable fit."""


class InitializationFailed(FlowPoseError):
    """Tracker initialization could not register the model."""


class EmptyInput(FlowPoseError):
    """An operation that needs at least one element got none."""


class EmptyRender(FlowPoseError):
    """A depth render produced no covered pixels."""


class LengthMismatch(FlowPoseError):
    """Two sequences that must have equal length do not."""


class ConfigError(FlowPoseError):
    """A config file has unknown keys or malformed values."""
