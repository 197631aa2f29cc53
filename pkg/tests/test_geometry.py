import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_rig, oracle_in_pair, random_box
from frustum_fusion.cloud import CAMERA_FRAME, LIDAR_FRAME, PointCloud
from frustum_fusion.geometry import (
    BBox2D,
    CameraIntrinsics,
    Frustum,
    FrustumIntersection,
    GeometryError,
    RigidTransform,
    StereoRig,
    frustum_from_bbox,
    in_intersection,
    intersection_from_boxes,
    nearest_rotation,
    project,
    transform_cloud,
    unproject,
)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


class TestIntrinsics:
    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(0.0, 700.0, 600, 170, 1242, 375)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(700.0, 700.0, 1300, 170, 1242, 375)

    def test_rig_requires_equal_focal(self):
        a = CameraIntrinsics(700.0, 700.0, 600, 170, 1242, 375)
        b = CameraIntrinsics(701.0, 700.0, 600, 170, 1242, 375)
        with pytest.raises(ValueError):
            StereoRig(a, b, 0.54)
        with pytest.raises(ValueError):
            StereoRig(a, a, 0.0)


class TestProject:
    def test_principal_ray(self, rig):
        assert project((0, 0, 10), rig.left) == (rig.left.c_u, rig.left.c_v)

    def test_hand_arithmetic(self):
        cam = CameraIntrinsics(700.0, 700.0, 600.0, 170.0, 1242, 375)
        u, v = project((1, 0, 1), cam)
        assert u == 1300.0
        assert v == 170.0

    @pytest.mark.parametrize("z", [0.0, -1.0])
    def test_behind_camera(self, rig, z):
        assert project((0, 0, z), rig.left) is None

    @settings(max_examples=300, deadline=None)
    @given(
        u=st.floats(-500, 1700),
        v=st.floats(-300, 700),
        z=st.floats(0.1, 200),
    )
    def test_unproject_round_trip(self, u, v, z):
        cam = make_rig().left
        p = unproject(u, v, z, cam)
        p2 = unproject(*project(p, cam), z, cam)
        np.testing.assert_allclose(p2, p, rtol=1e-9, atol=1e-9 * z)


class TestRigidTransform:
    def test_identity(self):
        cloud = PointCloud(np.arange(12.0).reshape(4, 3), np.linspace(0, 1, 4), LIDAR_FRAME)
        out = transform_cloud(cloud, RigidTransform.identity(), LIDAR_FRAME)
        np.testing.assert_array_equal(out.points, cloud.points)
        np.testing.assert_array_equal(out.intensities, cloud.intensities)

    def test_translation(self):
        out = RigidTransform.from_translation([1, 0, 0]).apply([[0, 0, 0]])
        np.testing.assert_array_equal(out, [[1, 0, 0]])

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, 1.001]))
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]))

    def test_round_trip_and_frame_tag(self, rng):
        for _ in range(50):
            t = RigidTransform(random_rotation(rng), rng.uniform(-10, 10, 3))
            cloud = PointCloud(rng.uniform(-50, 50, (100, 3)), rng.uniform(0, 1, 100), LIDAR_FRAME)
            there = transform_cloud(cloud, t, CAMERA_FRAME)
            back = transform_cloud(there, t.inverse(), LIDAR_FRAME)
            assert there.frame == CAMERA_FRAME and back.frame == LIDAR_FRAME
            np.testing.assert_allclose(back.points, cloud.points, rtol=0, atol=1e-9)
            np.testing.assert_array_equal(back.intensities, cloud.intensities)

    def test_preserves_pairwise_distances(self, rng):
        pts = rng.uniform(-50, 50, (200, 3))
        t = RigidTransform(random_rotation(rng), rng.uniform(-10, 10, 3))
        q = t.apply(pts)
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        d1 = np.linalg.norm(q[:, None] - q[None], axis=2)
        np.testing.assert_allclose(d1, d0, rtol=1e-9, atol=1e-12)

    def test_compose_matches_sequential(self, rng):
        a = RigidTransform(random_rotation(rng), rng.normal(size=3))
        b = RigidTransform(random_rotation(rng), rng.normal(size=3))
        p = rng.normal(size=(10, 3))
        np.testing.assert_allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12)

    def test_nearest_rotation_snaps(self, rng):
        R = random_rotation(rng) + rng.normal(scale=1e-4, size=(3, 3))
        RigidTransform(nearest_rotation(R))


class TestBBox:
    def test_degenerate(self):
        with pytest.raises(GeometryError):
            BBox2D(10, 10, 10, 20)

    def test_clamp(self):
        box = BBox2D(-20, -5, 50, 40).clamp(64, 48)
        assert (box.u_min, box.v_min, box.u_max, box.v_max) == (0, 0, 50, 40)

    def test_fully_outside(self):
        with pytest.raises(GeometryError):
            BBox2D(100, 10, 120, 20).clamp(64, 48)


class TestFrustum:
    def test_unit_normals(self, rig):
        fr = frustum_from_bbox(BBox2D(100, 50, 300, 200), rig.left)
        np.testing.assert_allclose(np.linalg.norm(fr.planes[:, :3], axis=1), 1.0, atol=1e-12)
        assert fr.planes.shape == (6, 4)

    def test_full_image_contains_principal_ray(self, rig):
        cam = rig.left
        fr = frustum_from_bbox(BBox2D(0, 0, cam.width - 1, cam.height - 1), cam, near=1, far=80)
        assert fr.contains([[0, 0, 10]])[0]

    def test_right_half_excludes_left_projection(self, rig):
        cam = rig.left
        fr = frustum_from_bbox(BBox2D(cam.c_u, 0, cam.width - 1, cam.height - 1), cam, near=1, far=80)
        p = unproject(cam.c_u - 5.0, cam.c_v, 20.0, cam)
        assert project(p, cam)[0] < cam.c_u
        assert not fr.contains(p)[0]

    def test_far_clip(self, rig):
        cam = rig.left
        fr = frustum_from_bbox(BBox2D(0, 0, cam.width - 1, cam.height - 1), cam, near=1, far=80)
        assert fr.contains([[0, 0, 80.0]])[0]
        assert not fr.contains([[0, 0, 80.0 + 1e-9]])[0]

    def test_rejects_bad_depth_range(self, rig):
        with pytest.raises(GeometryError):
            frustum_from_bbox(BBox2D(0, 0, 10, 10), rig.left, near=5, far=5)

    def test_rejects_out_of_image(self, rig):
        with pytest.raises(GeometryError):
            frustum_from_bbox(BBox2D(2000, 10, 2100, 50), rig.left)

    def test_boundary_point_counts_inside(self, small_rig):
        cam = small_rig.left
        box = BBox2D(10, 10, 40, 30)
        fr = frustum_from_bbox(box, cam, near=1, far=10)
        # the point on the left side plane, exactly
        p = unproject(10.0, 20.0, 4.0, cam)
        d = fr.signed_distances(p)[0]
        assert abs(d[0]) < 1e-12
        assert fr.contains(p)[0]

    def test_transformed_matches_point_transform(self, rng, rig):
        fr = frustum_from_bbox(BBox2D(300, 100, 700, 300), rig.left, near=1, far=60)
        t = RigidTransform(random_rotation(rng), rng.uniform(-5, 5, 3))
        pts = rng.uniform([-20, -5, -5], [20, 5, 70], (5000, 3))
        np.testing.assert_array_equal(fr.contains(pts), fr.transformed(t).contains(t.apply(pts)))

    def test_plane_count_validation(self):
        with pytest.raises(ValueError):
            Frustum(np.array([[0, 0, 1, 0]] * 3, dtype=float))

    def test_intersection_frame_mismatch(self, rig):
        a = frustum_from_bbox(BBox2D(0, 0, 100, 100), rig.left)
        b = frustum_from_bbox(BBox2D(0, 0, 100, 100), rig.left, frame="other")
        with pytest.raises(ValueError):
            FrustumIntersection(a, b)


class TestIntersection:
    def test_inside_both(self, rig):
        cam = rig.left
        p = np.array([0.5, 0.2, 20.0])
        (ul, vl), (ur, vr) = project(p, cam), project(p - [rig.baseline_b, 0, 0], rig.right)
        fi = intersection_from_boxes(
            BBox2D(ul - 10, vl - 10, ul + 10, vl + 10), BBox2D(ur - 10, vr - 10, ur + 10, vr + 10), rig
        )
        assert in_intersection(p, fi)

    def test_left_only(self, rig):
        cam = rig.left
        p = np.array([0.5, 0.2, 20.0])
        ul, vl = project(p, cam)
        # the right box is centred on the left-image position: disparity ~19.5 px puts p outside
        box = BBox2D(ul - 10, vl - 10, ul + 10, vl + 10)
        fi = intersection_from_boxes(box, box, rig)
        assert fi.left_frustum.contains(p)[0]
        assert not oracle_in_pair(p[None], box, box, rig, 0.5, 80.0)[0]
        assert not in_intersection(p, fi)

    def test_behind_near(self, rig):
        cam = rig.left
        full = BBox2D(0, 0, cam.width - 1, cam.height - 1)
        fi = intersection_from_boxes(full, full, rig, near=2.0, far=80.0)
        assert not in_intersection([0.0, 0.0, 1.0], fi)
        assert not in_intersection([0.0, 0.0, -5.0], fi)

    def test_membership_matches_projection_oracle(self, rng, rig):
        mism = 0
        for _ in range(50):
            lb, rb = random_box(rng, rig.left), random_box(rng, rig.right)
            pts = rng.uniform([-40, -5, -2], [40, 5, 90], (400, 3))
            fi = intersection_from_boxes(lb, rb, rig, near=0.5, far=80.0)
            dist = np.abs(np.hstack([fi.left_frustum.signed_distances(pts), fi.right_frustum.signed_distances(pts)]))
            clear = dist.min(axis=1) >= 1e-6
            got = fi.contains(pts)
            want = oracle_in_pair(pts, lb, rb, rig, 0.5, 80.0)
            mism += int(np.sum((got != want) & clear))
        assert mism == 0
