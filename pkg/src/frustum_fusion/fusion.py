"""Frustum Fusion: densify LiDAR inside stereo frustum intersections.

For every stereo detection the LiDAR and pseudo-LiDAR (PL) points inside the
intersection of the left and right frusta are extracted. A PL point is added
to the fused set when its nearest LiDAR neighbour *within that intersection*
is at least ``tau`` metres away. The reference set is fixed for the whole
pass, so the result does not depend on PL point order.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_scalar
from .cloud import CAMERA_FRAME, LIDAR_FRAME, PointCloud, Source
from .geometry import (
    DEFAULT_FAR,
    DEFAULT_NEAR,
    ClassLabel,
    RigidTransform,
    StereoRig,
    intersection_from_boxes,
)
from .spatial import KdIndex

DEFAULT_TAU = 0.7
TAU_SWEEP = (0.25, 0.5, 0.6, 0.7, 0.9)
# per-class thresholds that did best in downstream detector experiments; opt-in via per_class_tau
RECOMMENDED_PER_CLASS_TAU = {
    ClassLabel.CAR: 0.6,
    ClassLabel.CYCLIST: 0.9,
    ClassLabel.PEDESTRIAN: 0.7,
}


class OutputMode(str, Enum):
    FRUSTUM_ONLY = "FrustumOnly"
    FULL_SCENE = "FullScene"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"frustum": cls.FRUSTUM_ONLY, "scene": cls.FULL_SCENE}
        key = str(value)
        if key.lower() in aliases:
            return aliases[key.lower()]
        return cls(key)


@dataclass(frozen=True)
class FusionConfig:
    tau: float = DEFAULT_TAU
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    output_mode: OutputMode = OutputMode.FRUSTUM_ONLY
    added_intensity: float = 0.0
    per_class_tau: dict = None

    def __post_init__(self):
        check_scalar(self.tau, "tau", min_val=0.0)
        check_scalar(self.near, "near", min_val=0.0, strict_min=True)
        check_scalar(self.far, "far")
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        check_scalar(self.added_intensity, "added_intensity", min_val=0.0, max_val=1.0)
        object.__setattr__(self, "output_mode", OutputMode.parse(self.output_mode))
        if self.per_class_tau is not None:
            table = {}
            for k, v in dict(self.per_class_tau).items():
                table[ClassLabel(k)] = check_scalar(v, f"per_class_tau[{k}]", min_val=0.0)
            object.__setattr__(self, "per_class_tau", table)

    def tau_for(self, class_label):
        if self.per_class_tau and class_label is not None:
            return self.per_class_tau.get(ClassLabel(class_label), self.tau)
        return self.tau

    def to_dict(self):
        return {
            "tau": self.tau,
            "near": self.near,
            "far": self.far,
            "output_mode": self.output_mode.value,
            "added_intensity": self.added_intensity,
            "per_class_tau": (
                None
                if self.per_class_tau is None
                else {k.value: v for k, v in sorted(self.per_class_tau.items(), key=lambda kv: kv[0].value)}
            ),
        }


@dataclass(frozen=True)
class DetectionPair:
    left_box: object
    right_box: object
    class_label: ClassLabel = None

    def __post_init__(self):
        labels = {
            ClassLabel(b.class_label)
            for b in (self.left_box, self.right_box)
            if b.class_label is not None
        }
        if self.class_label is not None:
            labels.add(ClassLabel(self.class_label))
        if len(labels) > 1:
            raise ValueError(f"stereo boxes disagree on class: {sorted(l.value for l in labels)}")
        object.__setattr__(self, "class_label", labels.pop() if labels else None)


@dataclass
class DetectionReport:
    class_label: str
    tau: float
    lidar_in_intersection: int
    pl_in_intersection: int
    pl_added: int


@dataclass
class FusionReport:
    detections: list = field(default_factory=list)
    lidar_points_out: int = 0
    pl_points_added: int = 0
    output_points: int = 0
    timing_ms: dict = field(default_factory=dict)
    lidar_indices: np.ndarray = None
    added_indices: np.ndarray = None

    def to_dict(self, timings=True):
        out = {
            "detections": [asdict(d) for d in self.detections],
            "totals": {
                "lidar_in_intersection": sum(d.lidar_in_intersection for d in self.detections),
                "pl_in_intersection": sum(d.pl_in_intersection for d in self.detections),
                "pl_added": sum(d.pl_added for d in self.detections),
                "lidar_points_out": self.lidar_points_out,
                "pl_points_added": self.pl_points_added,
                "output_points": self.output_points,
            },
        }
        if timings:
            out["timing_ms"] = dict(self.timing_ms)
        return out


def _as_points(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points
    return check_points(cloud)


def extract_intersection(cloud, pair, rig, config=None, left_to_common=None):
    """Points of ``cloud`` inside the pair's frustum intersection.

    ``cloud`` must already be in the common frame (the left camera frame
    unless ``left_to_common`` says otherwise). Returns the subset cloud and
    the indices of its points in ``cloud``, in source order.
    """
    config = config or FusionConfig()
    fi = intersection_from_boxes(
        pair.left_box, pair.right_box, rig, left_to_common, config.near, config.far, cloud.frame
    )
    idx = np.flatnonzero(fi.contains(cloud.points))
    return cloud.subset(idx), idx


def fuse_single(lidar_in, pl_in, tau, index=None):
    """Indices of ``pl_in`` points whose nearest ``lidar_in`` point is >= ``tau`` away.

    ``index`` may pass a prebuilt :class:`KdIndex` over ``lidar_in``.
    """
    tau = check_scalar(tau, "tau", min_val=0.0)
    pl_pts = _as_points(pl_in)
    if pl_pts.shape[0] == 0:
        return np.zeros(0, dtype=np.intp)
    if index is None:
        index = KdIndex(_as_points(lidar_in))
    d2, _, _ = index.query_sq(pl_pts)
    return np.flatnonzero(d2 >= tau * tau)


@dataclass(frozen=True, eq=False)
class _PreparedDetection:
    pair: DetectionPair
    intersection: object
    tau: float
    lidar_idx: np.ndarray
    index: KdIndex


class FrustumFusion(BaseEstimator):
    """Estimator form of the fusion pass.

    ``fit`` takes the LiDAR scan and the frame's detections, extracts each
    frustum intersection and indexes its LiDAR points; ``transform`` takes the
    pseudo-LiDAR cloud and returns the fused cloud in the LiDAR's native
    frame. The per-frame :class:`FusionReport` is left in ``report_``.
    """

    def __init__(
        self,
        tau=DEFAULT_TAU,
        near=DEFAULT_NEAR,
        far=DEFAULT_FAR,
        output_mode="FrustumOnly",
        added_intensity=0.0,
        per_class_tau=None,
        n_jobs=1,
    ):
        self.tau = tau
        self.near = near
        self.far = far
        self.output_mode = output_mode
        self.added_intensity = added_intensity
        self.per_class_tau = per_class_tau
        self.n_jobs = n_jobs

    def _config(self):
        return FusionConfig(
            tau=self.tau,
            near=self.near,
            far=self.far,
            output_mode=self.output_mode,
            added_intensity=self.added_intensity,
            per_class_tau=self.per_class_tau,
        )

    def _map(self, fn, items):
        n_jobs = int(self.n_jobs or 1)
        if n_jobs <= 1 or len(items) <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(fn, items))

    def fit(self, X, y=None, *, detections=(), rig=None, lidar_to_cam=None):
        """Index the LiDAR side of every detection's frustum intersection.

        ``X`` is the LiDAR :class:`PointCloud`. When it is not already in the
        camera frame, ``lidar_to_cam`` maps it there.
        """
        if not isinstance(X, PointCloud):
            X = PointCloud(X, frame=CAMERA_FRAME if lidar_to_cam is None else LIDAR_FRAME)
        if not isinstance(rig, StereoRig):
            raise TypeError("rig must be a StereoRig")
        if (rig.left.width, rig.left.height) != (rig.right.width, rig.right.height):
            raise ValueError("left and right calibration disagree on image dimensions")
        config = self._config()
        t0 = time.perf_counter()
        if X.frame == CAMERA_FRAME:
            if lidar_to_cam is not None:
                raise ValueError("lidar cloud is already in the camera frame; drop lidar_to_cam")
            to_cam = RigidTransform.identity()
        elif lidar_to_cam is None:
            raise ValueError(f"lidar cloud is in frame {X.frame!r}; lidar_to_cam is required")
        else:
            to_cam = lidar_to_cam
        lidar_cam = to_cam.apply(X.points)
        t1 = time.perf_counter()

        def prepare(pair):
            fi = intersection_from_boxes(
                pair.left_box, pair.right_box, rig, None, config.near, config.far, CAMERA_FRAME
            )
            idx = np.flatnonzero(fi.contains(lidar_cam))
            return _PreparedDetection(pair, fi, config.tau_for(pair.class_label), idx, KdIndex(lidar_cam[idx]))

        self.prepared_ = self._map(prepare, list(detections))
        self.config_ = config
        self.rig_ = rig
        self.lidar_ = X
        self.lidar_to_cam_ = to_cam
        self._fit_timing = {"lidar_transform": 1e3 * (t1 - t0), "lidar_extract_index": 1e3 * (time.perf_counter() - t1)}
        return self

    def transform(self, X, pl_to_cam=None):
        """Fuse the pseudo-LiDAR cloud ``X`` into the fitted LiDAR scan."""
        check_is_fitted(self, "prepared_")
        if not isinstance(X, PointCloud):
            X = PointCloud(X, frame=CAMERA_FRAME, source=Source.PSEUDO_LIDAR)
        config = self.config_
        t0 = time.perf_counter()
        if X.frame == CAMERA_FRAME:
            pl_cam = X.points
        elif pl_to_cam is None:
            raise ValueError(f"pseudo-LiDAR cloud is in frame {X.frame!r}; pl_to_cam is required")
        else:
            pl_cam = pl_to_cam.apply(X.points)
        t1 = time.perf_counter()

        def run(prep):
            pl_idx = np.flatnonzero(prep.intersection.contains(pl_cam))
            added = pl_idx[fuse_single(None, pl_cam[pl_idx], prep.tau, index=prep.index)]
            return pl_idx, added

        results = self._map(run, self.prepared_)
        t2 = time.perf_counter()

        report = FusionReport()
        for prep, (pl_idx, added) in zip(self.prepared_, results):
            label = prep.pair.class_label
            report.detections.append(
                DetectionReport(
                    class_label=None if label is None else ClassLabel(label).value,
                    tau=prep.tau,
                    lidar_in_intersection=int(prep.lidar_idx.size),
                    pl_in_intersection=int(pl_idx.size),
                    pl_added=int(added.size),
                )
            )
        lidar = self.lidar_
        empty = np.zeros(0, dtype=np.intp)
        if config.output_mode is OutputMode.FULL_SCENE:
            lidar_keep = np.arange(len(lidar))
        else:
            lidar_keep = np.unique(np.concatenate([p.lidar_idx for p in self.prepared_] + [empty]))
        added_all = np.unique(np.concatenate([a for _, a in results] + [empty]))

        added_pts = pl_cam[added_all]
        if lidar.frame != CAMERA_FRAME:
            added_pts = self.lidar_to_cam_.inverse().apply(added_pts)
        points = np.vstack([lidar.points[lidar_keep], added_pts])
        if lidar.intensities is None and added_all.size == 0:
            inten = None
        else:
            inten = np.concatenate(
                [lidar.intensities_or(0.0)[lidar_keep], np.full(added_all.size, config.added_intensity)]
            )
        fused = PointCloud(points, inten, lidar.frame, Source.FUSED)
        t3 = time.perf_counter()

        report.lidar_points_out = int(lidar_keep.size)
        report.pl_points_added = int(added_all.size)
        report.output_points = len(fused)
        report.lidar_indices = lidar_keep
        report.added_indices = added_all
        report.timing_ms = dict(self._fit_timing)
        report.timing_ms.update(
            {
                "pl_transform": 1e3 * (t1 - t0),
                "pl_extract_fuse": 1e3 * (t2 - t1),
                "assemble": 1e3 * (t3 - t2),
            }
        )
        self.report_ = report
        return fused


def fuse_frame(lidar, pl, detections, rig, lidar_to_cam=None, config=None, pl_to_cam=None, n_jobs=1):
    """Run the full fusion pass on one frame; returns ``(fused_cloud, report)``."""
    config = config or FusionConfig()
    est = FrustumFusion(
        tau=config.tau,
        near=config.near,
        far=config.far,
        output_mode=config.output_mode,
        added_intensity=config.added_intensity,
        per_class_tau=config.per_class_tau,
        n_jobs=n_jobs,
    )
    est.fit(lidar, detections=detections, rig=rig, lidar_to_cam=lidar_to_cam)
    fused = est.transform(pl, pl_to_cam=pl_to_cam)
    return fused, est.report_
