"""Seeded synthetic stereo + LiDAR frames and in-box density metrics.

A scene is a flat ground plane with upright oriented boxes standing on it.
LiDAR is simulated by casting a ring pattern of rays from the sensor origin;
pseudo-LiDAR by casting one ray per left-image pixel, perturbing the depth
with Gaussian noise of standard deviation ``noise_k * z**2`` and converting
to disparity.
"""

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .cloud import LIDAR_FRAME, PointCloud, Source
from .geometry import ClassLabel, GeometryError
from .kitti_io import (
    CalibBundle,
    Label3D,
    box3d_corners,
    box_from_corners,
    parse_calib_text,
)
from .pseudolidar import DisparityMap, disparity_to_cloud

CLASS_DIMENSIONS = {  # h, w, l in metres
    "Car": (1.53, 1.63, 3.88),
    "Cyclist": (1.74, 0.60, 1.76),
    "Pedestrian": (1.76, 0.66, 0.84),
}
# velodyne (x fwd, y left, z up) -> camera (x right, y down, z fwd)
VELO_TO_CAM_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    class_name: str
    x: float
    z: float
    rotation_y: float = 0.0
    dimensions: tuple = None


@dataclass(frozen=True)
class SceneSpec:
    width: int = 1242
    height: int = 375
    focal: float = 721.5377
    c_u: float = 609.5593
    c_v: float = 172.854
    baseline: float = 0.54
    camera_height: float = 1.65
    lidar_offset: tuple = (0.0, -0.08, -0.27)
    lidar_beams: int = 64
    lidar_elevation_min: float = -24.8
    lidar_elevation_max: float = 2.0
    lidar_azimuth_step: float = 0.2
    lidar_azimuth_fov: float = 90.0
    lidar_max_range: float = 120.0
    lidar_noise: float = 0.01
    pl_stride: int = 1
    noise_k: float = 0.000625
    disparity_quantization: float = 1.0 / 256.0
    max_depth: float = 80.0
    n_objects: int = 3
    classes: tuple = ("Car", "Cyclist", "Pedestrian")
    x_range: tuple = (-6.0, 6.0)
    z_range: tuple = (8.0, 35.0)
    near: float = 0.5
    far: float = 80.0
    objects: tuple = ()

    @classmethod
    def from_text(cls, text):
        """Parse ``key = value`` lines; ``object = Class x z [ry [h w l]]`` may repeat."""
        kinds = {f.name: f for f in fields(cls)}
        values, objects = {}, []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SceneSpecError(f"line {lineno}: expected key=value")
            key, _, val = (s.strip() for s in line.partition("="))
            if key == "object":
                tok = val.split()
                if len(tok) not in (3, 4, 7):
                    raise SceneSpecError(f"line {lineno}: object needs 'Class x z [ry [h w l]]'")
                nums = [float(t) for t in tok[1:]]
                objects.append(
                    ObjectSpec(
                        tok[0], nums[0], nums[1],
                        nums[2] if len(nums) > 2 else 0.0,
                        tuple(nums[3:6]) if len(nums) == 6 else None,
                    )
                )
                continue
            if key not in kinds or key == "objects":
                raise SceneSpecError(f"line {lineno}: unknown key {key!r}")
            default = getattr(cls, key)
            try:
                if isinstance(default, tuple):
                    parts = [p for p in val.replace(",", " ").split() if p]
                    values[key] = tuple(parts) if key == "classes" else tuple(float(p) for p in parts)
                elif isinstance(default, int):
                    values[key] = int(val)
                else:
                    values[key] = float(val)
            except ValueError:
                raise SceneSpecError(f"line {lineno}: bad value for {key}: {val!r}") from None
        if objects:
            values["objects"] = tuple(objects)
        return cls(**values)

    def to_text(self):
        lines = []
        for f in fields(self):
            if f.name == "objects":
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
        for o in self.objects:
            extra = "" if o.dimensions is None else " " + " ".join(map(str, o.dimensions))
            lines.append(f"object = {o.class_name} {o.x} {o.z} {o.rotation_y}{extra}")
        return "\n".join(lines) + "\n"


@dataclass(eq=False)
class SyntheticScene:
    spec: SceneSpec
    seed: int
    labels: list
    calib: CalibBundle
    rig: object
    lidar_to_cam: object
    lidar: PointCloud
    disparity: DisparityMap
    pl: PointCloud
    detections: list = field(default_factory=list)


def make_calib(spec):
    f = spec.focal
    K = np.array([[f, 0.0, spec.c_u], [0.0, f, spec.c_v], [0.0, 0.0, 1.0]])
    P2 = np.column_stack([K, np.zeros(3)])
    P3 = np.column_stack([K, [-f * spec.baseline, 0.0, 0.0]])
    Tr = np.column_stack([VELO_TO_CAM_ROTATION, spec.lidar_offset])
    bundle = CalibBundle(P2.copy(), P3.copy(), P2, P3, np.eye(3), Tr)
    # round-trip through the text format so in-memory values equal what a reader sees
    return parse_calib_text(bundle.to_text())


def _ray_boxes(origin, dirs, boxes):
    """Nearest positive hit distance of each ray against oriented boxes; inf for none."""
    t_best = np.full(dirs.shape[0], np.inf)
    hit_box = np.full(dirs.shape[0], -1, dtype=np.int64)
    for k, (dims, loc, ry) in enumerate(boxes):
        h, w, l = dims
        c, s = math.cos(ry), math.sin(ry)
        R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        center = np.asarray(loc, dtype=np.float64) - np.array([0.0, h / 2.0, 0.0])
        half = np.array([l / 2.0, h / 2.0, w / 2.0])
        o = R.T @ (origin - center)
        d = dirs @ R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 0)
        better = hit & (tmin < t_best)
        t_best[better] = tmin[better]
        hit_box[better] = k
    return t_best, hit_box


def _ray_ground(origin, dirs, ground_y):
    t = np.full(dirs.shape[0], np.inf)
    down = dirs[:, 1] > 0
    t[down] = (ground_y - origin[1]) / dirs[down, 1]
    return t


def _place_objects(spec, rng, P2, P3, image_size):
    placed = []
    if spec.objects:
        todo = [(o, False) for o in spec.objects]
    else:
        todo = [(None, True)] * spec.n_objects
    for obj, random_pose in todo:
        for _attempt in range(200):
            if random_pose:
                cls = str(rng.choice(list(spec.classes)))
                base = np.array(CLASS_DIMENSIONS[cls])
                dims = tuple(base * rng.uniform(0.9, 1.1, size=3))
                x = rng.uniform(*spec.x_range)
                z = rng.uniform(*spec.z_range)
                ry = rng.uniform(-math.pi, math.pi)
            else:
                cls = obj.class_name
                if cls not in CLASS_DIMENSIONS:
                    raise SceneSpecError(f"unknown object class {cls!r}")
                dims = tuple(obj.dimensions or CLASS_DIMENSIONS[cls])
                x, z, ry = obj.x, obj.z, obj.rotation_y
            loc = (x, spec.camera_height, z)
            corners = box3d_corners(dims, loc, ry)
            ok = _visible(corners, spec, P2, P3) and not _overlaps(loc, dims, placed)
            if ok:
                placed.append((cls, dims, loc, ry))
                break
            if not random_pose:
                raise SceneSpecError(
                    f"object {cls} at x={x}, z={z} is not fully inside both images within "
                    f"[{spec.near}, {spec.far}] m or overlaps another object"
                )
        else:
            raise SceneSpecError("could not place a random object inside both camera views")
    return placed


def _visible(corners, spec, P2, P3):
    if corners[:, 2].min() <= spec.near or corners[:, 2].max() >= spec.far:
        return False
    for P in (P2, P3):
        hom = np.column_stack([corners, np.ones(8)]) @ P.T
        uv = hom[:, :2] / hom[:, 2:3]
        if uv[:, 0].min() < 0 or uv[:, 0].max() > spec.width - 1:
            return False
        if uv[:, 1].min() < 0 or uv[:, 1].max() > spec.height - 1:
            return False
    return True


def _overlaps(loc, dims, placed):
    r = 0.5 * math.hypot(dims[1], dims[2])
    for _, d, l, _ in placed:
        if math.hypot(loc[0] - l[0], loc[2] - l[2]) < r + 0.5 * math.hypot(d[1], d[2]) + 0.3:
            return True
    return False


def _simulate_lidar(spec, rng, boxes, lidar_to_cam):
    elev = np.radians(np.linspace(spec.lidar_elevation_min, spec.lidar_elevation_max, spec.lidar_beams))
    half = spec.lidar_azimuth_fov / 2.0
    n_az = int(round(spec.lidar_azimuth_fov / spec.lidar_azimuth_step)) + 1
    azim = np.radians(np.linspace(half, -half, n_az))
    el, az = np.meshgrid(elev, azim, indexing="ij")
    dirs_velo = np.column_stack(
        [(np.cos(el) * np.cos(az)).ravel(), (np.cos(el) * np.sin(az)).ravel(), np.sin(el).ravel()]
    )
    R = lidar_to_cam.rotation
    origin = lidar_to_cam.translation
    dirs_cam = dirs_velo @ R.T
    t_box, _ = _ray_boxes(origin, dirs_cam, boxes)
    t_gnd = _ray_ground(origin, dirs_cam, spec.camera_height)
    on_box = t_box <= t_gnd
    t = np.minimum(t_box, t_gnd)
    keep = np.isfinite(t) & (t <= spec.lidar_max_range)
    t = t + rng.normal(0.0, spec.lidar_noise, size=t.shape) if spec.lidar_noise > 0 else t
    pts = dirs_velo[keep] * t[keep, None]
    inten = np.where(on_box[keep], 0.7, 0.25) + rng.uniform(-0.05, 0.05, size=int(keep.sum()))
    rec = np.column_stack([pts, inten]).astype(np.float32).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3], LIDAR_FRAME, Source.LIDAR)


def _simulate_disparity(spec, rng, boxes, rig):
    cam = rig.left
    v, u = np.mgrid[0 : cam.height, 0 : cam.width]
    u = u.ravel().astype(np.float64)
    v = v.ravel().astype(np.float64)
    dirs = np.column_stack([(u - cam.c_u) / cam.f_u, (v - cam.c_v) / cam.f_v, np.ones_like(u)])
    origin = np.zeros(3)
    t_box, _ = _ray_boxes(origin, dirs, boxes)
    t_gnd = _ray_ground(origin, dirs, spec.camera_height)
    z = np.minimum(t_box, t_gnd)  # dirs have unit z, so t is depth
    noise = rng.normal(0.0, 1.0, size=z.shape)
    # surfaces beyond the depth cap are not observed; far ground would otherwise
    # produce huge noisy depths and a few absurd disparities
    valid = np.isfinite(z) & (z <= spec.max_depth)
    if spec.pl_stride > 1:
        valid &= (u % spec.pl_stride == 0) & (v % spec.pl_stride == 0)
    z_noisy = np.where(valid, z + spec.noise_k * np.where(valid, z, 0.0) ** 2 * noise, np.inf)
    valid &= z_noisy > 0
    disp = np.zeros_like(z)
    disp[valid] = cam.f_u * rig.baseline_b / z_noisy[valid]
    if spec.disparity_quantization > 0:
        disp = np.round(disp / spec.disparity_quantization) * spec.disparity_quantization
        valid &= disp > 0
    disp[~valid] = 0.0
    return DisparityMap(disp.reshape(cam.height, cam.width), valid.reshape(cam.height, cam.width))


def generate_scene(seed, spec=None):
    """Deterministic synthetic frame for ``seed``.

    Raises :class:`SceneSpecError` when an explicit object cannot be seen
    entirely by both cameras inside the near/far range.
    """
    from .fusion import DetectionPair

    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    calib = make_calib(spec)
    image_size = (spec.width, spec.height)
    rig = calib.stereo_rig(image_size)
    lidar_to_cam = calib.lidar_to_left_camera()

    placed = _place_objects(spec, rng, calib.P2, calib.P3, image_size)
    boxes = [(dims, loc, ry) for _, dims, loc, ry in placed]
    labels, detections = [], []
    for cls, dims, loc, ry in placed:
        corners = box3d_corners(dims, loc, ry)
        try:
            left = box_from_corners(calib.P2, corners, image_size, ClassLabel(cls))
            right = box_from_corners(calib.P3, corners, image_size, ClassLabel(cls))
        except GeometryError as exc:
            raise SceneSpecError(f"object {cls} at {loc}: {exc}") from None
        alpha = ry - math.atan2(loc[0], loc[2])
        labels.append(
            Label3D(cls, 0.0, 0, alpha, (left.u_min, left.v_min, left.u_max, left.v_max), dims, loc, ry)
        )
        detections.append(DetectionPair(left, right, ClassLabel(cls)))

    lidar = _simulate_lidar(spec, rng, boxes, lidar_to_cam)
    disparity = _simulate_disparity(spec, rng, boxes, rig)
    pl = disparity_to_cloud(disparity, rig, spec.max_depth)
    return SyntheticScene(spec, seed, labels, calib, rig, lidar_to_cam, lidar, disparity, pl, detections)


def points_in_box(points, dimensions, location, rotation_y, margin=1e-6):
    """Boolean mask of camera-frame points inside an oriented label box (inflated by ``margin``)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    h, w, l = dimensions
    c, s = math.cos(rotation_y), math.sin(rotation_y)
    R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    center = np.asarray(location, dtype=np.float64) - np.array([0.0, h / 2.0, 0.0])
    local = (pts - center) @ R
    half = np.array([l / 2.0, h / 2.0, w / 2.0]) + margin
    return np.all(np.abs(local) <= half, axis=1)


def density_metrics(cloud, boxes, margin=1e-6):
    """Per-box point counts and points per cubic metre.

    ``cloud`` must be in the rectified camera frame of the boxes; ``boxes`` is
    a sequence of :class:`Label3D` (or ``(dims, location, rotation_y)``).
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    records = []
    for i, box in enumerate(boxes):
        if isinstance(box, Label3D):
            dims, loc, ry, name = box.dimensions, box.location, box.rotation_y, box.class_name
        else:
            (dims, loc, ry), name = box, None
        count = int(points_in_box(pts, dims, loc, ry, margin).sum()) if len(pts) else 0
        volume = float(np.prod(dims))
        records.append(
            {"box": i, "class": name, "count": count, "volume_m3": volume, "points_per_m3": count / volume}
        )
    return records


def metrics_jsonl(records):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
