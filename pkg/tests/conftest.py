from pathlib import Path

import numpy as np
import pytest

from frustum_fusion.geometry import BBox2D, CameraIntrinsics, StereoRig, project_points

FIXTURES = Path(__file__).parent / "fixtures"


def make_rig(f=721.5377, cu=609.5593, cv=172.854, width=1242, height=375, b=0.54):
    cam = CameraIntrinsics(f, f, cu, cv, width, height)
    return StereoRig(cam, cam, b)


@pytest.fixture
def rig():
    return make_rig()


@pytest.fixture
def small_rig():
    return make_rig(f=100.0, cu=32.0, cv=24.0, width=64, height=48, b=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def oracle_in_pair(points_cam, left_box, right_box, rig, near, far):
    """Projection oracle: project into both cameras and compare with the (clamped) boxes.

    Works in the left-camera frame; the right camera sits ``b`` to the right.
    """
    pts = np.asarray(points_cam, dtype=np.float64)
    z = pts[:, 2]
    inside = (z >= near) & (z <= far)
    lb = left_box.clamp(rig.left.width, rig.left.height)
    rb = right_box.clamp(rig.right.width, rig.right.height)
    uv_l, front = project_points(pts, rig.left)
    uv_r, _ = project_points(pts - np.array([rig.baseline_b, 0.0, 0.0]), rig.right)
    with np.errstate(invalid="ignore"):
        inside &= front & lb.contains_uv(uv_l[:, 0], uv_l[:, 1]) & rb.contains_uv(uv_r[:, 0], uv_r[:, 1])
    return inside


def random_box(rng, cam, min_size=20.0):
    u0 = rng.uniform(0, cam.width - min_size - 1)
    v0 = rng.uniform(0, cam.height - min_size - 1)
    u1 = rng.uniform(u0 + min_size, cam.width - 1)
    v1 = rng.uniform(v0 + min_size, cam.height - 1)
    return BBox2D(u0, v0, u1, v1)


def brute_force_fusion(lidar_cam, pl_cam, detections, rig, near, far, tau_for):
    """Independent reference: projection-oracle membership + all-pairs distances.

    Returns ``(lidar_union, added_union, per_detection)`` with global indices.
    """
    lidar_sets, added_sets, per = [], [], []
    for det in detections:
        li = np.flatnonzero(oracle_in_pair(lidar_cam, det.left_box, det.right_box, rig, near, far))
        pi = np.flatnonzero(oracle_in_pair(pl_cam, det.left_box, det.right_box, rig, near, far))
        tau = tau_for(det.class_label)
        added = []
        L = lidar_cam[li]
        for start in range(0, len(pi), 512):
            chunk = pl_cam[pi[start : start + 512]]
            if len(L) == 0:
                added.extend(pi[start : start + 512])
                continue
            diff = chunk[:, None, :] - L[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=2)).min(axis=1)
            added.extend(pi[start : start + 512][dist >= tau])
        added = np.asarray(added, dtype=np.intp)
        lidar_sets.append(li)
        added_sets.append(added)
        per.append((li, pi, added))
    empty = np.zeros(0, dtype=np.intp)
    return (
        np.unique(np.concatenate(lidar_sets + [empty])),
        np.unique(np.concatenate(added_sets + [empty])),
        per,
    )
