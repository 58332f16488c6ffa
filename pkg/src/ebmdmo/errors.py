"""Exception types shared across the package.

Each error names the contract it guards; callers catch these rather than
bare ValueError so the CLI can map failures onto stable exit codes.
"""


class EbmDmoError(Exception):
    """Base class for all package errors."""


class DegenerateRotation(EbmDmoError):
    """6D rotation input has a near-zero or near-parallel vector pair."""


class NotARotation(EbmDmoError):
    """Matrix fails the orthonormality / determinant check."""


class BehindCamera(EbmDmoError):
    """3D point is at or behind the camera plane."""


class TooShort(EbmDmoError):
    """Trajectory has too few poses for the requested operation."""


class LengthMismatch(EbmDmoError):
    """Two trajectories have different lengths."""


class ShapeMismatch(EbmDmoError):
    """Array shape inconsistent with the model or operation contract."""


class NonFinite(EbmDmoError):
    """A value that must be finite is NaN or infinite."""


class NonFiniteLoss(EbmDmoError):
    """Training loss became NaN/inf; aborts the training job."""


class PlacementFailure(EbmDmoError):
    """Rejection sampling could not place scene objects within budget."""


class EmptyDataset(EbmDmoError):
    """An operation requires at least one episode/motion."""


class IoError(EbmDmoError):
    """Dataset or checkpoint read/write failure."""
