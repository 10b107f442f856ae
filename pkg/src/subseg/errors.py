"""Exception types shared across the package."""


class SubsegError(Exception):
    """Base class for all package-specific errors."""


class InvalidOrientationCode(SubsegError):
    """Orientation string is not a signed permutation of R/L, A/P, S/I."""


class NonPositiveSpacing(SubsegError):
    """A voxel spacing component is zero or negative."""


class ConstantIntensity(SubsegError):
    """Intensity rescaling is undefined: all nonzero voxels share one value."""


class EmptyVolume(SubsegError):
    """Volume contains no nonzero voxels."""


class FrameOutOfBounds(SubsegError):
    """Crop frame does not fit inside the full conformed grid."""


class IncompatibleDims(SubsegError):
    """Crop dims violate the patch-grid rule (>= 96 and (d - 96) % 16 == 0)."""


class OffsetOutOfPlan(SubsegError):
    """Patch offset is not part of the active patch plan."""


class ShapeMismatch(SubsegError):
    """Array shapes disagree where they must match."""


class NonNormalizedProbabilities(SubsegError):
    """Per-voxel class probabilities do not sum to 1 within tolerance."""


class UncoveredVoxel(SubsegError):
    """A voxel was never covered by any accumulated patch."""


class UnknownClassIndex(SubsegError):
    """Label value outside the 0..31 class-index range."""


class ChannelMismatch(SubsegError):
    """Feature tensor channel count differs from the configured width."""


class SkipShapeMismatch(SubsegError):
    """Decoder skip tensor does not match the expected encoder shape."""


class EmptyDataset(SubsegError):
    """Training requires at least one case."""


class NonFiniteLoss(SubsegError):
    """Training loss became NaN or infinite."""


class EmptyInput(SubsegError):
    """Aggregation requires at least one report."""


class CheckpointMismatch(SubsegError):
    """Checkpoint config or label-table fingerprint disagrees with the runtime."""
