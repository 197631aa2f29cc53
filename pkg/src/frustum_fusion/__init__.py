"""Frustum Fusion: pseudo-LiDAR generation and frustum-intersection fusion with LiDAR."""

__version__ = "0.1.0"

from .cloud import CAMERA_FRAME, LIDAR_FRAME, PointCloud, Source
from .fusion import (
    DEFAULT_TAU,
    RECOMMENDED_PER_CLASS_TAU,
    TAU_SWEEP,
    DetectionPair,
    FrustumFusion,
    FusionConfig,
    FusionReport,
    OutputMode,
    extract_intersection,
    fuse_frame,
    fuse_single,
)
from .geometry import (
    BBox2D,
    CameraIntrinsics,
    ClassLabel,
    Frustum,
    FrustumIntersection,
    GeometryError,
    RigidTransform,
    StereoRig,
    frustum_from_bbox,
    in_intersection,
    intersection_from_boxes,
    project,
    transform_cloud,
    unproject,
)
from .pseudolidar import (
    DisparityMap,
    PseudoLidarConverter,
    depth_to_disparity,
    disparity_to_cloud,
    sparsify_like_lidar,
)
from .spatial import KdIndex

__all__ = [
    "BBox2D",
    "CAMERA_FRAME",
    "CameraIntrinsics",
    "ClassLabel",
    "DEFAULT_TAU",
    "DetectionPair",
    "DisparityMap",
    "Frustum",
    "FrustumFusion",
    "FrustumIntersection",
    "FusionConfig",
    "FusionReport",
    "GeometryError",
    "KdIndex",
    "LIDAR_FRAME",
    "OutputMode",
    "RECOMMENDED_PER_CLASS_TAU",
    "PointCloud",
    "PseudoLidarConverter",
    "RigidTransform",
    "Source",
    "StereoRig",
    "TAU_SWEEP",
    "depth_to_disparity",
    "disparity_to_cloud",
    "extract_intersection",
    "frustum_from_bbox",
    "fuse_frame",
    "fuse_single",
    "in_intersection",
    "intersection_from_boxes",
    "project",
    "sparsify_like_lidar",
    "transform_cloud",
    "unproject",
]
