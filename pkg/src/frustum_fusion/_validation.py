"""Input validation helpers shared by the estimators and free functions."""

import numbers

import numpy as np


def check_points(points, name="points", allow_empty=True):
    """Return ``points`` as a C-contiguous float64 array of shape (N, 3)."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(arr), axis=1))[0])
        raise ValueError(f"{name} has non-finite coordinates at row {bad}")
    return np.ascontiguousarray(arr)


def check_point(point, name="point"):
    arr = np.asarray(point, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite components")
    return arr


def check_scalar(value, name, *, min_val=None, max_val=None, strict_min=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite")
    if min_val is not None:
        if strict_min and value <= min_val:
            raise ValueError(f"{name} must be > {min_val}, got {value}")
        if not strict_min and value < min_val:
            raise ValueError(f"{name} must be >= {min_val}, got {value}")
    if max_val is not None and value > max_val:
        raise ValueError(f"{name} must be <= {max_val}, got {value}")
    return value


def check_intensities(intensities, n, name="intensities"):
    if intensities is None:
        return None
    arr = np.ascontiguousarray(np.asarray(intensities, dtype=np.float64).reshape(-1))
    if arr.shape[0] != n:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {n}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite values")
    return arr
