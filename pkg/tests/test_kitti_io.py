import logging
import struct

import numpy as np
import pytest

from conftest import FIXTURES
from frustum_fusion.cloud import LIDAR_FRAME, PointCloud, Source
from frustum_fusion.geometry import GeometryError
from frustum_fusion.kitti_io import (
    CalibBundle,
    FormatError,
    Label3D,
    box3d_corners,
    derive_right_bbox,
    detections_from_labels,
    parse_calib,
    parse_calib_text,
    parse_labels,
    read_velodyne_bin,
    write_velodyne_bin,
)

CAR_LINE = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"


def synthetic_calib(f=700.0, cu=600.0, cv=180.0, b=0.5):
    K = np.array([[f, 0, cu], [0, f, cv], [0, 0, 1.0]])
    P2 = np.column_stack([K, np.zeros(3)])
    P3 = np.column_stack([K, [-f * b, 0, 0]])
    Tr = np.column_stack([[[0, -1, 0], [0, 0, -1], [1, 0, 0]], [0.0, -0.08, -0.27]])
    return CalibBundle(P2, P3, P2, P3, np.eye(3), Tr)


class TestVelodyne:
    def test_empty(self, tmp_path):
        (tmp_path / "e.bin").write_bytes(b"")
        cloud = read_velodyne_bin(tmp_path / "e.bin")
        assert len(cloud) == 0 and cloud.frame == LIDAR_FRAME and cloud.source is Source.LIDAR

    def test_hand_encoded(self, tmp_path):
        (tmp_path / "p.bin").write_bytes(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
        cloud = read_velodyne_bin(tmp_path / "p.bin")
        np.testing.assert_array_equal(cloud.points, [[1, 2, 3]])
        np.testing.assert_array_equal(cloud.intensities, [0.5])

    def test_round_trip_bytes(self, tmp_path, rng):
        raw = rng.normal(size=(1000, 4)).astype("<f4").tobytes()
        (tmp_path / "a.bin").write_bytes(raw)
        write_velodyne_bin(read_velodyne_bin(tmp_path / "a.bin"), tmp_path / "b.bin")
        assert (tmp_path / "b.bin").read_bytes() == raw

    def test_write_then_read(self, tmp_path):
        cloud = PointCloud([[1.5, -2.25, 3.0]], [0.125])
        write_velodyne_bin(cloud, tmp_path / "c.bin")
        back = read_velodyne_bin(tmp_path / "c.bin")
        np.testing.assert_array_equal(back.points, cloud.points)
        np.testing.assert_array_equal(back.intensities, cloud.intensities)

    def test_truncated(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(bytes(40))
        with pytest.raises(FormatError, match="byte offset 32"):
            read_velodyne_bin(tmp_path / "t.bin")

    def test_non_finite(self, tmp_path):
        data = struct.pack("<4f", 0, 0, 0, 0) + struct.pack("<4f", 1, float("nan"), 0, 0)
        (tmp_path / "n.bin").write_bytes(data)
        with pytest.raises(FormatError, match="record 1"):
            read_velodyne_bin(tmp_path / "n.bin")


class TestCalib:
    def test_real_fixture_baseline(self):
        bundle, rig, lidar_to_cam = parse_calib(FIXTURES / "kitti_calib_000000.txt")
        assert 0.50 <= rig.baseline_b <= 0.58
        assert rig.baseline_b == pytest.approx((45.75831 + 334.1081) / 707.0493, rel=1e-12)
        assert rig.left.f_u == 707.0493 and rig.left.c_u == 604.0814 and rig.left.c_v == 180.5066
        # lidar origin sits roughly 0.3 m behind and 0.08 m above the left colour camera
        origin = lidar_to_cam.apply([[0.0, 0.0, 0.0]])[0]
        assert -0.45 < origin[2] < -0.2 and -0.2 < origin[1] < 0.0

    def test_lidar_transform_matches_raw_matrices(self):
        bundle, _, lidar_to_cam = parse_calib(FIXTURES / "kitti_calib_000000.txt")
        rng = np.random.default_rng(0)
        velo = rng.uniform([5, -10, -2], [60, 10, 2], (200, 3))
        # reference chain: P2 @ R0 @ Tr, projected to pixels
        hom = np.column_stack([velo, np.ones(len(velo))])
        rect = (bundle.R0_rect @ (bundle.Tr_velo_to_cam @ hom.T)).T
        img = (bundle.P2 @ np.column_stack([rect, np.ones(len(rect))]).T).T
        uv_ref = img[:, :2] / img[:, 2:3]
        cam = lidar_to_cam.apply(velo)
        f, cu, cv = bundle.P2[0, 0], bundle.P2[0, 2], bundle.P2[1, 2]
        uv = np.column_stack([cam[:, 0] * f / cam[:, 2] + cu, cam[:, 1] * f / cam[:, 2] + cv])
        # rotations are snapped to SO(3); residual is far below a pixel
        assert np.max(np.abs(uv - uv_ref)) < 0.05

    def test_synthetic_round_trip(self, tmp_path):
        bundle = synthetic_calib(f=721.5, cu=609.5, cv=172.75, b=0.5)
        (tmp_path / "c.txt").write_text(bundle.to_text())
        _, rig, _ = parse_calib(tmp_path / "c.txt")
        assert (rig.left.f_u, rig.left.f_v, rig.left.c_u, rig.left.c_v) == (721.5, 721.5, 609.5, 172.75)
        assert rig.baseline_b == 0.5

    def test_missing_p3(self):
        text = "\n".join(l for l in synthetic_calib().to_text().splitlines() if not l.startswith("P3"))
        with pytest.raises(FormatError, match="P3 absent"):
            parse_calib_text(text)

    def test_wrong_count(self):
        text = synthetic_calib().to_text().replace("R0_rect: ", "R0_rect: 1.0 ")
        with pytest.raises(FormatError, match="R0_rect has 10 values"):
            parse_calib_text(text)

    def test_non_orthonormal_r0(self):
        b = synthetic_calib()
        bad = CalibBundle(b.P0, b.P1, b.P2, b.P3, np.diag([1.0, 1.0, 1.01]), b.Tr_velo_to_cam)
        with pytest.raises(FormatError, match="orthonormal"):
            parse_calib_text(bad.to_text())

    def test_negative_baseline(self):
        b = synthetic_calib()
        swapped = CalibBundle(b.P0, b.P1, b.P3, b.P2, b.R0_rect, b.Tr_velo_to_cam)
        with pytest.raises(FormatError, match="baseline"):
            parse_calib_text(swapped.to_text())


class TestLabels:
    def test_empty(self, tmp_path):
        (tmp_path / "l.txt").write_text("")
        assert parse_labels(tmp_path / "l.txt") == []

    def test_car_line(self, tmp_path):
        (tmp_path / "l.txt").write_text(CAR_LINE + "\n")
        (lab,) = parse_labels(tmp_path / "l.txt")
        assert lab.class_name == "Car" and not lab.ignored
        assert lab.bbox == (587.01, 173.33, 614.12, 200.12)
        assert lab.dimensions == (1.65, 1.67, 3.64)
        assert lab.location == (-0.65, 1.71, 46.70)
        assert lab.rotation_y == -1.59 and lab.occlusion == 0 and lab.alpha == -1.58

    def test_fourteen_fields(self, tmp_path):
        (tmp_path / "l.txt").write_text(CAR_LINE + "\n" + " ".join(CAR_LINE.split()[:14]) + "\n")
        with pytest.raises(FormatError, match=":2: expected 15 fields, got 14"):
            parse_labels(tmp_path / "l.txt")

    def test_ignored_classes(self, tmp_path):
        text = CAR_LINE + "\nDontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n"
        (tmp_path / "l.txt").write_text(text)
        labs = parse_labels(tmp_path / "l.txt")
        assert [l.ignored for l in labs] == [False, True]

    def test_to_line_round_trip(self, tmp_path):
        (tmp_path / "l.txt").write_text(CAR_LINE + "\n")
        (lab,) = parse_labels(tmp_path / "l.txt")
        assert lab.to_line() == CAR_LINE.replace("46.70", "46.70")


class TestRightBox:
    def label(self, x=0.0, y=1.65, z=40.0, ry=0.0, dims=(1.5, 1.6, 3.9)):
        return Label3D("Car", 0.0, 0, 0.0, (0, 0, 1, 1), dims, (x, y, z), ry)

    def test_disparity_shift_on_principal_ray(self):
        calib = synthetic_calib(f=721.5377, cu=609.5593, cv=172.854, b=0.54)
        lab = self.label(y=0.75)  # box centred on the optical axis
        corners = box3d_corners(lab.dimensions, lab.location, lab.rotation_y)
        hom = np.column_stack([corners, np.ones(8)]) @ calib.P2.T
        uv = hom[:, :2] / hom[:, 2:3]
        right = derive_right_bbox(lab, calib)
        shift = 721.5377 * 0.54 / 40.0
        assert abs(right.u_min - (uv[:, 0].min() - shift)) < 1.0
        assert abs(right.u_max - (uv[:, 0].max() - shift)) < 1.0
        assert abs(right.v_min - uv[:, 1].min()) < 1e-9
        assert abs(right.v_max - uv[:, 1].max()) < 1e-9

    def test_axis_aligned_hand_projection(self):
        f, cu, cv, b = 700.0, 600.0, 180.0, 0.5
        calib = synthetic_calib(f, cu, cv, b)
        h, w, l = 2.0, 2.0, 4.0
        lab = self.label(x=1.0, y=1.0, z=20.0, dims=(h, w, l))
        # ry = 0: x spans [x - l/2, x + l/2], y spans [y - h, y], z spans [z - w/2, z + w/2]
        xs, ys, zs = (-1.0, 3.0), (-1.0, 1.0), (19.0, 21.0)
        us = [f * (x - b) / z + cu for x in xs for z in zs]
        vs = [f * y / z + cv for y in ys for z in zs]
        right = derive_right_bbox(lab, calib)
        assert right.u_min == pytest.approx(min(us), abs=1e-9)
        assert right.u_max == pytest.approx(max(us), abs=1e-9)
        assert right.v_min == pytest.approx(min(vs), abs=1e-9)
        assert right.v_max == pytest.approx(max(vs), abs=1e-9)

    def test_behind_camera(self):
        with pytest.raises(GeometryError, match="behind"):
            derive_right_bbox(self.label(z=-10.0), synthetic_calib())

    def test_corners_inside(self, rng):
        calib = synthetic_calib(f=721.5377, cu=609.5593, cv=172.854, b=0.54)
        for _ in range(100):
            lab = self.label(x=rng.uniform(-4, 4), z=rng.uniform(10, 50), ry=rng.uniform(-np.pi, np.pi))
            box = derive_right_bbox(lab, calib, min_area=0)
            corners = box3d_corners(lab.dimensions, lab.location, lab.rotation_y)
            hom = np.column_stack([corners, np.ones(8)]) @ calib.P3.T
            uv = hom[:, :2] / hom[:, 2:3]
            if uv[:, 0].min() >= 0 and uv[:, 0].max() <= 1241 and uv[:, 1].min() >= 0 and uv[:, 1].max() <= 374:
                assert np.all(box.contains_uv(uv[:, 0], uv[:, 1]))

    def test_detections_skip_unusable(self, caplog):
        calib = synthetic_calib(f=721.5377, cu=609.5593, cv=172.854, b=0.54)
        good = Label3D("Car", 0, 0, 0, (500, 150, 700, 250), (1.5, 1.6, 3.9), (0.0, 1.65, 15.0), 0.0)
        behind = Label3D("Pedestrian", 0, 0, 0, (500, 150, 700, 250), (1.7, 0.6, 0.8), (0.0, 1.65, -5.0), 0.0)
        dontcare = Label3D("DontCare", -1, -1, -10, (1, 1, 50, 50), (-1, -1, -1), (-1000, -1000, -1000), -10)
        with caplog.at_level(logging.WARNING):
            dets = detections_from_labels([good, behind, dontcare], calib)
        assert len(dets) == 1 and dets[0].class_label.value == "Car"
        assert "skipping label 1" in caplog.text
