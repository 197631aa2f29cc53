"""Pseudo-LiDAR generation from dense stereo disparity.

Each valid pixel ``(u, v)`` with disparity ``Y`` becomes the left-camera point

    z = f_u * b / Y,  x = (u - c_u) * z / f_u,  y = (v - c_v) * z / f_v

Points are emitted in row-major pixel order.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_scalar
from .cloud import CAMERA_FRAME, PointCloud, Source
from .geometry import StereoRig

DEFAULT_MAX_DEPTH = 80.0
DEFAULT_HEIGHT_CLIP = 1.0

RAW_MAGIC = b"DSP1"
_RAW_HEADER = struct.Struct("<4sIII")
PNG_SCALE = 256.0


class DisparityFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DisparityMap:
    """Dense disparity in pixels, indexed ``values[v, u]``.

    ``valid_mask`` defaults to the finite, strictly positive entries.
    """

    values: np.ndarray
    valid_mask: np.ndarray = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"disparity must be 2D (height, width), got {vals.shape}")
        if self.valid_mask is None:
            with np.errstate(invalid="ignore"):
                mask = np.isfinite(vals) & (vals > 0)
        else:
            mask = np.array(self.valid_mask, dtype=bool)
            if mask.shape != vals.shape:
                raise ValueError("valid_mask shape does not match values")
            with np.errstate(invalid="ignore"):
                bad = mask & ~(np.isfinite(vals) & (vals > 0))
            if bad.any():
                v, u = np.argwhere(bad)[0]
                raise ValueError(
                    f"mask violation: pixel (u={u}, v={v}) is marked valid "
                    f"but has disparity {vals[v, u]}"
                )
        vals[~mask] = 0.0
        vals.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def n_valid(self):
        return int(self.valid_mask.sum())


def depth_to_disparity(depth, rig):
    """Pseudo-disparity ``f_u * b / depth`` for a metric depth map; depth <= 0 is invalid."""
    d = np.asarray(depth, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        valid = np.isfinite(d) & (d > 0)
        disp = np.where(valid, rig.left.f_u * rig.baseline_b / np.where(valid, d, 1.0), 0.0)
    return DisparityMap(disp, valid)


def disparity_to_cloud(
    disp,
    rig,
    max_depth=DEFAULT_MAX_DEPTH,
    height_clip=DEFAULT_HEIGHT_CLIP,
    fill_intensity=0.0,
):
    """Back-project every valid pixel into the rectified left-camera frame.

    Points deeper than ``max_depth`` or more than ``height_clip`` metres above
    the optical centre (``y < -height_clip``; y points down) are dropped.
    ``height_clip=None`` disables the height filter.
    """
    if not isinstance(disp, DisparityMap):
        disp = DisparityMap(disp)
    max_depth = check_scalar(max_depth, "max_depth", min_val=0.0, strict_min=True)
    cam = rig.left
    if (disp.width, disp.height) != (cam.width, cam.height):
        raise ValueError(
            f"disparity is {disp.width}x{disp.height} but the left camera image "
            f"is {cam.width}x{cam.height}"
        )
    v, u = np.nonzero(disp.valid_mask)
    Y = disp.values[v, u]
    z = cam.f_u * rig.baseline_b / Y
    x = (u - cam.c_u) * z / cam.f_u
    y = (v - cam.c_v) * z / cam.f_v
    keep = z <= max_depth
    if height_clip is not None:
        keep &= y >= -check_scalar(height_clip, "height_clip")
    pts = np.column_stack([x[keep], y[keep], z[keep]])
    inten = np.full(pts.shape[0], float(fill_intensity))
    return PointCloud(pts, inten, CAMERA_FRAME, Source.PSEUDO_LIDAR)


def sparsify_like_lidar(cloud, beams, azimuth_resolution=0.08):
    """Thin a dense cloud to a LiDAR-like ring pattern.

    Elevation angles are snapped to ``beams`` uniformly spaced beams spanning
    the observed elevation range; within each (beam, azimuth step) cell only
    the point closest to the beam elevation survives. Angles in degrees.
    Kept points retain their input order.
    """
    if Source(cloud.source) is not Source.PSEUDO_LIDAR:
        raise ValueError("sparsify_like_lidar expects a PseudoLidar cloud")
    if int(beams) < 1:
        raise ValueError("beams must be >= 1")
    beams = int(beams)
    step = np.radians(check_scalar(azimuth_resolution, "azimuth_resolution", min_val=0.0, strict_min=True))
    n = len(cloud)
    if n == 0:
        return cloud
    x, y, z = cloud.points.T
    elev = np.arctan2(-y, np.hypot(x, z))
    azim = np.arctan2(x, z)
    lo, hi = elev.min(), elev.max()
    spacing = (hi - lo) / (beams - 1) if beams > 1 else 0.0
    if spacing > 0:
        beam = np.clip(np.rint((elev - lo) / spacing), 0, beams - 1).astype(np.int64)
        beam_angle = lo + beam * spacing
    else:
        beam = np.zeros(n, dtype=np.int64)
        beam_angle = np.full(n, 0.5 * (lo + hi))
    col = np.floor((azim - azim.min()) / step).astype(np.int64)
    err = np.abs(elev - beam_angle)
    # lexsort: last key is primary; index breaks ties deterministically
    order = np.lexsort((np.arange(n), err, col, beam))
    b_sorted, c_sorted = beam[order], col[order]
    first = np.ones(n, dtype=bool)
    first[1:] = (b_sorted[1:] != b_sorted[:-1]) | (c_sorted[1:] != c_sorted[:-1])
    return cloud.subset(np.sort(order[first]))


class PseudoLidarConverter(TransformerMixin, BaseEstimator):
    """Estimator wrapper turning disparity maps into pseudo-LiDAR clouds.

    ``transform`` accepts a :class:`DisparityMap` or a 2D disparity array
    (zero marks invalid pixels).
    """

    def __init__(self, rig=None, max_depth=DEFAULT_MAX_DEPTH, height_clip=DEFAULT_HEIGHT_CLIP, fill_intensity=0.0):
        self.rig = rig
        self.max_depth = max_depth
        self.height_clip = height_clip
        self.fill_intensity = fill_intensity

    def fit(self, X=None, y=None):
        if not isinstance(self.rig, StereoRig):
            raise TypeError("rig must be a StereoRig")
        check_scalar(self.max_depth, "max_depth", min_val=0.0, strict_min=True)
        check_scalar(self.fill_intensity, "fill_intensity", min_val=0.0, max_val=1.0)
        self.rig_ = self.rig
        return self

    def transform(self, X):
        check_is_fitted(self, "rig_")
        return disparity_to_cloud(X, self.rig_, self.max_depth, self.height_clip, self.fill_intensity)


def read_disparity_png(path):
    """16-bit single-channel image, ``pixel / 256`` = disparity, 0 = invalid."""
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise DisparityFormatError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise DisparityFormatError(f"{path}: unsupported pixel type {arr.dtype}")
    raw = arr.astype(np.float64)
    return DisparityMap(raw / PNG_SCALE, raw > 0)


def write_disparity_png(disp, path):
    scaled = np.rint(disp.values * PNG_SCALE)
    if scaled.max(initial=0) > 65535:
        raise DisparityFormatError("disparity exceeds the 16-bit PNG range (max 255.996 px)")
    scaled[~disp.valid_mask] = 0
    Image.fromarray(scaled.astype(np.uint16)).save(path, format="PNG")


def read_disparity_raw(path):
    """Raw little-endian float32 disparity with a 16-byte header.

    Header: magic ``DSP1``, uint32 width, uint32 height, uint32 reserved.
    Non-positive or non-finite values are invalid.
    """
    data = Path(path).read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise DisparityFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, width, height, _ = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise DisparityFormatError(f"{path}: bad magic {magic!r}")
    expected = _RAW_HEADER.size + 4 * width * height
    if len(data) != expected:
        raise DisparityFormatError(f"{path}: expected {expected} bytes for {width}x{height}, got {len(data)}")
    vals = np.frombuffer(data, dtype="<f4", offset=_RAW_HEADER.size).reshape(height, width)
    vals = vals.astype(np.float64)
    with np.errstate(invalid="ignore"):
        mask = np.isfinite(vals) & (vals > 0)
    vals[~mask] = 0.0
    return DisparityMap(vals, mask)


def write_disparity_raw(disp, path):
    vals = np.where(disp.valid_mask, disp.values, 0.0).astype("<f4")
    with open(path, "wb") as f:
        f.write(_RAW_HEADER.pack(RAW_MAGIC, disp.width, disp.height, 0))
        f.write(vals.tobytes())


def read_disparity(path):
    """Dispatch on extension: ``.png`` images, anything else the raw format."""
    if Path(path).suffix.lower() == ".png":
        return read_disparity_png(path)
    return read_disparity_raw(path)


def write_disparity(disp, path):
    if Path(path).suffix.lower() == ".png":
        write_disparity_png(disp, path)
    else:
        write_disparity_raw(disp, path)
