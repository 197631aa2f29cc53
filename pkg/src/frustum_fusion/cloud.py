"""Point cloud container tagged with its coordinate frame and provenance."""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._validation import check_intensities, check_points

#: Native LiDAR (velodyne) frame: x forward, y left, z up.
LIDAR_FRAME = "lidar"
#: Rectified left-camera frame: x right, y down, z forward.
CAMERA_FRAME = "cam_left"


class Source(str, Enum):
    LIDAR = "Lidar"
    PSEUDO_LIDAR = "PseudoLidar"
    FUSED = "Fused"


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points with optional per-point intensity.

    ``points`` is stored as float64 (N, 3); ``intensities`` is either None or
    float64 (N,). Arrays are made read-only so clouds can be shared freely.
    """

    points: np.ndarray
    intensities: np.ndarray = None
    frame: str = LIDAR_FRAME
    source: Source = Source.LIDAR

    def __post_init__(self):
        pts = check_points(self.points)
        inten = check_intensities(self.intensities, pts.shape[0])
        pts.flags.writeable = False
        if inten is not None:
            inten.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensities", inten)
        object.__setattr__(self, "source", Source(self.source))

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def empty(cls, frame=LIDAR_FRAME, source=Source.LIDAR, with_intensity=True):
        return cls(
            np.zeros((0, 3)),
            np.zeros(0) if with_intensity else None,
            frame=frame,
            source=source,
        )

    def subset(self, indices):
        """Points at ``indices`` (order kept), same frame and source."""
        indices = np.asarray(indices, dtype=np.intp)
        inten = None if self.intensities is None else self.intensities[indices]
        return PointCloud(self.points[indices], inten, self.frame, self.source)

    def intensities_or(self, fill=0.0):
        if self.intensities is None:
            return np.full(len(self), float(fill))
        return self.intensities

    def __repr__(self):
        return (
            f"PointCloud(n={len(self)}, frame={self.frame!r}, "
            f"source={self.source.value}, intensity={self.intensities is not None})"
        )
