"""Camera models, rigid transforms and frustums induced by 2D boxes.

Frustums are stored as inward-facing half-spaces ``n . p + d >= 0`` with unit
normals. A point lying on a plane (to within ``PLANE_EPS``) counts as inside.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ._validation import check_point, check_points, check_scalar
from .cloud import CAMERA_FRAME, PointCloud

PLANE_EPS = 1e-12
ORTHONORMAL_TOL = 1e-9

DEFAULT_NEAR = 0.5
DEFAULT_FAR = 80.0


class GeometryError(ValueError):
    """Raised for degenerate or out-of-image boxes and invalid frusta."""


class ClassLabel(str, Enum):
    CAR = "Car"
    CYCLIST = "Cyclist"
    PEDESTRIAN = "Pedestrian"


@dataclass(frozen=True)
class CameraIntrinsics:
    f_u: float
    f_v: float
    c_u: float
    c_v: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.f_u > 0 and self.f_v > 0):
            raise ValueError(f"focal lengths must be positive, got {self.f_u}, {self.f_v}")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image size must be positive")
        if not (0 < self.c_u < self.width and 0 < self.c_v < self.height):
            raise ValueError(
                f"principal point ({self.c_u}, {self.c_v}) outside image "
                f"{self.width}x{self.height}"
            )
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def K(self):
        return np.array(
            [[self.f_u, 0.0, self.c_u], [0.0, self.f_v, self.c_v], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p_target = rotation @ p_source + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation has determinant != +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_translation(cls, translation):
        return cls(np.eye(3), translation)

    @classmethod
    def from_matrix(cls, matrix):
        """Build from a 3x4 or 4x4 homogeneous matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise ValueError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        pts = check_points(points)
        return pts @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other):
        """Transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other):
        return self.compose(other)

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def nearest_rotation(matrix):
    """Closest proper rotation to ``matrix`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair; the right camera sits ``baseline_b`` metres to the right."""

    left: CameraIntrinsics
    right: CameraIntrinsics
    baseline_b: float

    def __post_init__(self):
        if not self.baseline_b > 0:
            raise ValueError(f"baseline must be positive, got {self.baseline_b}")
        if abs(self.left.f_u - self.right.f_u) > 1e-6 * abs(self.left.f_u):
            raise ValueError("rectified rig requires equal horizontal focal lengths")

    @property
    def right_to_left(self):
        return RigidTransform.from_translation([self.baseline_b, 0.0, 0.0])

    @property
    def left_to_right(self):
        return RigidTransform.from_translation([-self.baseline_b, 0.0, 0.0])


@dataclass(frozen=True)
class BBox2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    class_label: ClassLabel = None

    def __post_init__(self):
        vals = (self.u_min, self.v_min, self.u_max, self.v_max)
        if not all(np.isfinite(vals)):
            raise GeometryError("bbox has non-finite coordinates")
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise GeometryError(f"degenerate bbox {vals}")
        if self.class_label is not None:
            object.__setattr__(self, "class_label", ClassLabel(self.class_label))

    @property
    def area(self):
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)

    def clamp(self, width, height):
        """Clip to the pixel-centre extent ``[0, width-1] x [0, height-1]``."""
        if (
            self.u_max < 0
            or self.v_max < 0
            or self.u_min > width - 1
            or self.v_min > height - 1
        ):
            raise GeometryError(f"bbox {self} lies entirely outside the image")
        u0, u1 = max(self.u_min, 0.0), min(self.u_max, width - 1.0)
        v0, v1 = max(self.v_min, 0.0), min(self.v_max, height - 1.0)
        if not (u0 < u1 and v0 < v1):
            raise GeometryError(f"bbox {self} has zero area after clamping")
        return BBox2D(u0, v0, u1, v1, self.class_label)

    def contains_uv(self, u, v):
        return (u >= self.u_min) & (u <= self.u_max) & (v >= self.v_min) & (v <= self.v_max)


@dataclass(frozen=True, eq=False)
class Frustum:
    """Convex volume bounded by half-spaces ``planes[:, :3] . p + planes[:, 3] >= 0``."""

    planes: np.ndarray
    frame: str = CAMERA_FRAME

    def __post_init__(self):
        p = np.array(self.planes, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 4 or not 4 <= p.shape[0] <= 6:
            raise ValueError(f"frustum needs 4-6 planes of 4 coefficients, got {p.shape}")
        norms = np.linalg.norm(p[:, :3], axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("plane normals must have unit length")
        p.flags.writeable = False
        object.__setattr__(self, "planes", p)

    def signed_distances(self, points):
        pts = check_points(points)
        return pts @ self.planes[:, :3].T + self.planes[:, 3]

    def contains(self, points):
        pts = check_points(points)
        if pts.shape[0] == 0:
            return np.zeros(0, dtype=bool)
        return np.all(self.signed_distances(pts) >= -PLANE_EPS, axis=1)

    def transformed(self, t, frame=None):
        """The same volume expressed in the frame reached by ``t``."""
        n = self.planes[:, :3] @ t.rotation.T
        d = self.planes[:, 3] - n @ t.translation
        return Frustum(np.column_stack([n, d]), frame or self.frame)


@dataclass(frozen=True)
class FrustumIntersection:
    left_frustum: Frustum
    right_frustum: Frustum

    def __post_init__(self):
        if self.left_frustum.frame != self.right_frustum.frame:
            raise ValueError(
                f"frusta in different frames: {self.left_frustum.frame!r} "
                f"vs {self.right_frustum.frame!r}"
            )

    @property
    def frame(self):
        return self.left_frustum.frame

    def contains(self, points):
        pts = check_points(points)
        if pts.shape[0] == 0:
            return np.zeros(0, dtype=bool)
        planes = np.vstack([self.left_frustum.planes, self.right_frustum.planes])
        dist = pts @ planes[:, :3].T + planes[:, 3]
        return np.all(dist >= -PLANE_EPS, axis=1)


def project(point, cam):
    """Pixel ``(u, v)`` of a camera-frame point, or None when ``z <= 0``."""
    x, y, z = check_point(point)
    if z <= 0:
        return None
    return (x * cam.f_u / z + cam.c_u, y * cam.f_v / z + cam.c_v)


def project_points(points, cam):
    """Vectorised projection; returns ``(uv, in_front)`` with NaN rows behind the camera."""
    pts = check_points(points)
    z = pts[:, 2]
    in_front = z > 0
    uv = np.full((pts.shape[0], 2), np.nan)
    zf = z[in_front]
    uv[in_front, 0] = pts[in_front, 0] * cam.f_u / zf + cam.c_u
    uv[in_front, 1] = pts[in_front, 1] * cam.f_v / zf + cam.c_v
    return uv, in_front


def unproject(u, v, z, cam):
    """Camera-frame point at depth ``z`` seen at pixel ``(u, v)``."""
    return np.array([(u - cam.c_u) * z / cam.f_u, (v - cam.c_v) * z / cam.f_v, z], dtype=np.float64)


def _unit(n):
    return n / np.linalg.norm(n)


def frustum_from_bbox(
    bbox,
    cam,
    cam_to_common=None,
    near=DEFAULT_NEAR,
    far=DEFAULT_FAR,
    frame=CAMERA_FRAME,
):
    """Six inward half-spaces of the volume that projects into ``bbox``.

    The box is clamped to the image first. In the camera frame, a point is
    inside iff ``near <= z <= far`` and its projection lies in the box.
    """
    near = check_scalar(near, "near", min_val=0.0, strict_min=True)
    far = check_scalar(far, "far")
    if not far > near:
        raise GeometryError(f"far ({far}) must exceed near ({near})")
    box = bbox.clamp(cam.width, cam.height)
    fu, fv, cu, cv = cam.f_u, cam.f_v, cam.c_u, cam.c_v
    normals = np.array(
        [
            _unit(np.array([fu, 0.0, cu - box.u_min])),
            _unit(np.array([-fu, 0.0, box.u_max - cu])),
            _unit(np.array([0.0, fv, cv - box.v_min])),
            _unit(np.array([0.0, -fv, box.v_max - cv])),
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ]
    )
    offsets = np.array([0.0, 0.0, 0.0, 0.0, -near, far])
    frustum = Frustum(np.column_stack([normals, offsets]), frame)
    if cam_to_common is not None:
        frustum = frustum.transformed(cam_to_common, frame)
    return frustum


def intersection_from_boxes(
    left_box,
    right_box,
    rig,
    left_to_common=None,
    near=DEFAULT_NEAR,
    far=DEFAULT_FAR,
    frame=CAMERA_FRAME,
):
    """Frustum intersection of a stereo box pair expressed in a common frame.

    ``left_to_common`` maps the left camera frame into the common frame; it
    defaults to identity (common frame = left camera).
    """
    if left_to_common is None:
        left_to_common = RigidTransform.identity()
    right_to_common = left_to_common @ rig.right_to_left
    return FrustumIntersection(
        frustum_from_bbox(left_box, rig.left, left_to_common, near, far, frame),
        frustum_from_bbox(right_box, rig.right, right_to_common, near, far, frame),
    )


def in_intersection(point, fi):
    return bool(fi.contains(check_point(point).reshape(1, 3))[0])


def transform_cloud(cloud, t, frame):
    """Map every point by ``t``; intensities and source are preserved."""
    return PointCloud(t.apply(cloud.points), cloud.intensities, frame, cloud.source)
