"""Readers and writers for KITTI-style calibration, scan and label files.

Grammars
--------
calibration
    One ``KEY: v1 v2 ...`` line per matrix. ``P0``..``P3`` carry 12 values
    (3x4, row-major), ``R0_rect`` 9 values, ``Tr_velo_to_cam`` 12 values.
scan
    Packed little-endian float32 records ``(x, y, z, reflectance)``,
    16 bytes per point, no header.
labels
    One object per line, 15 whitespace-separated fields: type, truncated,
    occluded, alpha, bbox (left, top, right, bottom), dimensions (h, w, l),
    location (x, y, z), rotation_y. A trailing 16th score field is accepted.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import CAMERA_FRAME, LIDAR_FRAME, PointCloud, Source
from .geometry import (
    BBox2D,
    CameraIntrinsics,
    ClassLabel,
    GeometryError,
    RigidTransform,
    StereoRig,
    nearest_rotation,
)

log = logging.getLogger(__name__)

KITTI_IMAGE_SIZE = (1242, 375)
RECORD_DTYPE = np.dtype("<f4")
RECORD_BYTES = 16
R0_ORTHONORMAL_TOL = 1e-3
MIN_BOX_AREA = 100.0
FUSED_CLASSES = frozenset(c.value for c in ClassLabel)

_CALIB_KEYS = {
    "P0": ("P0",),
    "P1": ("P1",),
    "P2": ("P2",),
    "P3": ("P3",),
    "R0_rect": ("R0_rect", "R_rect", "R0"),
    "Tr_velo_to_cam": ("Tr_velo_to_cam", "Tr_velo_cam"),
}
_CALIB_SIZES = {"P0": 12, "P1": 12, "P2": 12, "P3": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


class FormatError(ValueError):
    """Malformed or truncated input file."""


# --------------------------------------------------------------------- scans


def read_velodyne_bin(path):
    data = Path(path).read_bytes()
    if len(data) % RECORD_BYTES:
        offset = len(data) - len(data) % RECORD_BYTES
        raise FormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"(file length {len(data)} is not a multiple of {RECORD_BYTES})"
        )
    rec = np.frombuffer(data, dtype=RECORD_DTYPE).reshape(-1, 4)
    finite = np.all(np.isfinite(rec), axis=1)
    if not finite.all():
        raise FormatError(f"{path}: non-finite value in record {int(np.flatnonzero(~finite)[0])}")
    rec = rec.astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3], LIDAR_FRAME, Source.LIDAR)


def velodyne_bytes(cloud):
    rec = np.empty((len(cloud), 4), dtype=RECORD_DTYPE)
    rec[:, :3] = cloud.points
    rec[:, 3] = cloud.intensities_or(0.0)
    return rec.tobytes()


def write_velodyne_bin(cloud, path):
    """Write ``cloud`` as packed float32 records, atomically (temp file + rename)."""
    write_bytes_atomic(path, velodyne_bytes(cloud))


def write_bytes_atomic(path, data):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# --------------------------------------------------------------- calibration


@dataclass(frozen=True, eq=False)
class CalibBundle:
    P0: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    P3: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray

    def intrinsics(self, which=2, image_size=KITTI_IMAGE_SIZE):
        P = getattr(self, f"P{which}")
        return CameraIntrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2], *image_size)

    def baseline(self):
        return (self.P2[0, 3] - self.P3[0, 3]) / self.P2[0, 0]

    def stereo_rig(self, image_size=KITTI_IMAGE_SIZE):
        return StereoRig(self.intrinsics(2, image_size), self.intrinsics(3, image_size), self.baseline())

    def camera_offset(self, which=2):
        """Translation from the rectified reference camera to camera ``which``."""
        P = getattr(self, f"P{which}")
        tz = P[2, 3]
        return np.array(
            [(P[0, 3] - P[0, 2] * tz) / P[0, 0], (P[1, 3] - P[1, 2] * tz) / P[1, 1], tz]
        )

    def lidar_to_rect(self):
        """LiDAR -> rectified reference camera, rotations snapped to SO(3)."""
        R0 = nearest_rotation(self.R0_rect)
        tr = RigidTransform(nearest_rotation(self.Tr_velo_to_cam[:, :3]), self.Tr_velo_to_cam[:, 3])
        return RigidTransform(R0) @ tr

    def lidar_to_left_camera(self):
        """LiDAR -> rectified left colour camera, the frame pseudo-LiDAR lives in."""
        return RigidTransform.from_translation(self.camera_offset(2)) @ self.lidar_to_rect()

    def to_text(self):
        lines = []
        for key in ("P0", "P1", "P2", "P3", "R0_rect", "Tr_velo_to_cam"):
            vals = np.asarray(getattr(self, key), dtype=np.float64).reshape(-1)
            lines.append(f"{key}: " + " ".join(f"{v:.12e}" for v in vals))
        return "\n".join(lines) + "\n"


def _check_rotation(R, name, tol):
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if err > tol:
        raise FormatError(f"{name} is not orthonormal (max |R^T R - I| = {err:.3g} > {tol})")
    if np.linalg.det(R) < 0:
        raise FormatError(f"{name} is a reflection (det < 0)")


def parse_calib_text(text, source="<calib>"):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if ":" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'KEY: values'")
        key, _, rest = line.partition(":")
        try:
            raw[key.strip()] = np.array([float(t) for t in rest.split()])
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from None
    mats = {}
    for key, aliases in _CALIB_KEYS.items():
        found = next((a for a in aliases if a in raw), None)
        if found is None:
            if key in ("P0", "P1"):
                mats[key] = np.full((3, 4), np.nan)
                continue
            raise FormatError(f"{source}: {key} absent")
        vals = raw[found]
        if vals.size != _CALIB_SIZES[key]:
            raise FormatError(f"{source}: {found} has {vals.size} values, expected {_CALIB_SIZES[key]}")
        mats[key] = vals.reshape(3, 3) if key == "R0_rect" else vals.reshape(3, 4)
    _check_rotation(mats["R0_rect"], "R0_rect", R0_ORTHONORMAL_TOL)
    _check_rotation(mats["Tr_velo_to_cam"][:, :3], "Tr_velo_to_cam rotation", R0_ORTHONORMAL_TOL)
    for key in ("P2", "P3"):
        P = mats[key]
        if not (P[0, 0] > 0 and P[1, 1] > 0):
            raise FormatError(f"{source}: {key} has non-positive focal length")
    bundle = CalibBundle(**mats)
    if not bundle.baseline() > 0:
        raise FormatError(f"{source}: recovered baseline {bundle.baseline():.6g} m is not positive")
    return bundle


def parse_calib(path, image_size=KITTI_IMAGE_SIZE):
    """Returns ``(CalibBundle, StereoRig, lidar -> left-camera RigidTransform)``."""
    bundle = parse_calib_text(Path(path).read_text(), str(path))
    try:
        rig = bundle.stereo_rig(image_size)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return bundle, rig, bundle.lidar_to_left_camera()


def write_calib(bundle, path):
    write_bytes_atomic(path, bundle.to_text().encode())


# -------------------------------------------------------------------- labels


@dataclass(frozen=True)
class Label3D:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple
    dimensions: tuple  # h, w, l
    location: tuple  # x, y, z of the bottom-face centre, rectified camera frame
    rotation_y: float
    score: float = None

    @property
    def ignored(self):
        return self.class_name not in FUSED_CLASSES

    @property
    def class_label(self):
        return None if self.ignored else ClassLabel(self.class_name)

    def left_box(self):
        u0, v0, u1, v1 = self.bbox
        return BBox2D(u0, v0, u1, v1, self.class_label)

    def to_line(self):
        fields = [
            self.class_name,
            f"{self.truncation:.2f}",
            str(int(self.occlusion)),
            f"{self.alpha:.2f}",
            *(f"{v:.2f}" for v in self.bbox),
            *(f"{v:.2f}" for v in self.dimensions),
            *(f"{v:.2f}" for v in self.location),
            f"{self.rotation_y:.2f}",
        ]
        if self.score is not None:
            fields.append(f"{self.score:.4f}")
        return " ".join(fields)


def parse_label_line(line, lineno=0, source="<labels>"):
    tok = line.split()
    if len(tok) not in (15, 16):
        raise FormatError(f"{source}:{lineno}: expected 15 fields, got {len(tok)}")
    try:
        v = [float(t) for t in tok[1:]]
    except ValueError as exc:
        raise FormatError(f"{source}:{lineno}: {exc}") from None
    label = Label3D(
        class_name=tok[0],
        truncation=v[0],
        occlusion=int(v[1]),
        alpha=v[2],
        bbox=tuple(v[3:7]),
        dimensions=tuple(v[7:10]),
        location=tuple(v[10:13]),
        rotation_y=v[13],
        score=v[14] if len(v) == 15 else None,
    )
    if not label.ignored and min(label.dimensions) <= 0:
        raise FormatError(f"{source}:{lineno}: non-positive dimensions {label.dimensions}")
    return label


def parse_labels(path):
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            labels.append(parse_label_line(line, lineno, str(path)))
    return labels


def write_labels(labels, path):
    text = "".join(l.to_line() + "\n" for l in labels)
    write_bytes_atomic(path, text.encode())


def box3d_corners(dimensions, location, rotation_y):
    """Eight corners (8, 3) of a label box in the rectified camera frame.

    The box origin is the bottom-face centre; y points down, so the top face
    sits at ``y - h``. Yaw rotates about the camera y axis.
    """
    h, w, l = dimensions
    x = np.array([l, l, -l, -l, l, l, -l, -l]) / 2.0
    y = np.array([0, 0, 0, 0, -h, -h, -h, -h], dtype=np.float64)
    z = np.array([w, -w, -w, w, w, -w, -w, w]) / 2.0
    c, s = np.cos(rotation_y), np.sin(rotation_y)
    R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return (R @ np.vstack([x, y, z])).T + np.asarray(location, dtype=np.float64)


def project_with_P(P, points):
    """Pixel coordinates and depth of rectified-frame points through a 3x4 matrix."""
    hom = np.column_stack([points, np.ones(len(points))]) @ np.asarray(P).T
    return hom[:, :2] / hom[:, 2:3], hom[:, 2]


def box_from_corners(P, corners, image_size, class_label=None, min_area=MIN_BOX_AREA):
    uv, depth = project_with_P(P, corners)
    if np.all(depth <= 0):
        raise GeometryError("box lies entirely behind the camera")
    if np.any(depth <= 0):
        raise GeometryError("box straddles the camera plane; projected hull undefined")
    hull = BBox2D(uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max(), class_label)
    box = hull.clamp(*image_size)
    if box.area < min_area:
        raise GeometryError(f"visible box area {box.area:.1f} px^2 below {min_area}")
    return box


def derive_right_bbox(label, calib, image_size=KITTI_IMAGE_SIZE, min_area=MIN_BOX_AREA):
    """Right-image box: hull of the label's 3D corners projected through P3, clamped."""
    corners = box3d_corners(label.dimensions, label.location, label.rotation_y)
    return box_from_corners(calib.P3, corners, image_size, label.class_label, min_area)


def detections_from_labels(labels, calib, image_size=KITTI_IMAGE_SIZE, min_area=MIN_BOX_AREA):
    """Stereo detection pairs for the fused classes; unusable labels are skipped with a warning."""
    from .fusion import DetectionPair

    pairs = []
    for i, label in enumerate(labels):
        if label.ignored:
            continue
        try:
            left = label.left_box().clamp(*image_size)
            if left.area < min_area:
                raise GeometryError(f"visible box area {left.area:.1f} px^2 below {min_area}")
            right = derive_right_bbox(label, calib, image_size, min_area)
        except GeometryError as exc:
            log.warning("skipping label %d (%s): %s", i, label.class_name, exc)
            continue
        pairs.append(DetectionPair(left, right, label.class_label))
    return pairs
