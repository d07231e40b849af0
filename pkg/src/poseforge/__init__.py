"""poseforge: synthetic multi-view whole-body pose dataset construction,
the 3-task lifting benchmark, and the cross-check annotation service."""

from .skeleton import (
    KeypointLayout,
    Pose2D,
    Pose3D,
    center_on,
    part_slice,
    symmetric_length_error,
)

__all__ = [
    "KeypointLayout",
    "Pose2D",
    "Pose3D",
    "center_on",
    "part_slice",
    "symmetric_length_error",
]

__version__ = "0.1.0"
