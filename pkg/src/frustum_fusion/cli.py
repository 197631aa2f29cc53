"""Command-line front end: ``frustum-fusion {convert,fuse,filter,report,bench,synth}``.

Exit codes: 0 success, 1 some frames failed, 2 invalid invocation or inputs
(including every frame failing).
"""

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .cloud import CAMERA_FRAME, PointCloud, Source
from .fusion import RECOMMENDED_PER_CLASS_TAU, FusionConfig, fuse_frame
from .geometry import ClassLabel
from .kitti_io import (
    KITTI_IMAGE_SIZE,
    detections_from_labels,
    parse_calib,
    parse_labels,
    read_velodyne_bin,
    write_bytes_atomic,
    write_calib,
    write_labels,
    write_velodyne_bin,
)
from .pseudolidar import (
    DEFAULT_HEIGHT_CLIP,
    DEFAULT_MAX_DEPTH,
    depth_to_disparity,
    disparity_to_cloud,
    read_disparity,
    write_disparity,
)
from .spatial import KdIndex, brute_force_nearest_sq
from .synth import SceneSpec, density_metrics, generate_scene, metrics_jsonl

log = logging.getLogger("frustum_fusion")

WORKERS_ENV = "FRUSTUM_FUSION_WORKERS"
EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2


class StageError(Exception):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _stage(stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FileNotFoundError as exc:
        raise StageError(stage, f"no such file: {exc.filename}") from None
    except (OSError, ValueError) as exc:
        raise StageError(stage, str(exc)) from None


def _image_size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    return w, h


def _per_class_tau(text):
    if text.strip().lower() == "recommended":
        return dict(RECOMMENDED_PER_CLASS_TAU)
    table = {}
    for item in text.split(","):
        key, sep, val = item.partition("=")
        try:
            if not sep:
                raise ValueError
            table[ClassLabel(key.strip())] = float(val)
        except ValueError:
            raise argparse.ArgumentTypeError(
                f"expected 'Car=0.6,Cyclist=0.9,...' or 'recommended', got {text!r}"
            ) from None
    return table


def _default_workers():
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ------------------------------------------------------------------- convert


def _load_pl(calib_path, disparity_path, depth_path, max_depth, height_clip, image_size):
    _, rig, _ = _stage("calib", parse_calib, calib_path, image_size)
    if depth_path is not None:
        depth = _stage("depth", read_disparity, depth_path)
        rig = _resize_rig(rig, depth.width, depth.height)
        disp = depth_to_disparity(np.where(depth.valid_mask, depth.values, 0.0), rig)
    else:
        disp = _stage("disparity", read_disparity, disparity_path)
        rig = _resize_rig(rig, disp.width, disp.height)
    return _stage("pseudolidar", disparity_to_cloud, disp, rig, max_depth, height_clip)


def _resize_rig(rig, width, height):
    """Image size is not stored in calibration files; take it from the disparity map."""
    from dataclasses import replace

    try:
        return replace(rig, left=replace(rig.left, width=width, height=height), right=replace(rig.right, width=width, height=height))
    except ValueError as exc:
        raise StageError("calib", f"calibration incompatible with {width}x{height} disparity: {exc}") from None


def cmd_convert(args):
    cloud = _load_pl(args.calib, args.disparity, args.depth, args.max_depth, args.height_clip, args.image_size)
    if len(cloud) == 0:
        log.warning("no valid disparity pixels; writing an empty cloud")
    _stage("write", write_velodyne_bin, cloud, args.out)
    print(len(cloud))
    return EXIT_OK


# ---------------------------------------------------------------------- fuse


@dataclass
class FrameJob:
    stem: str
    calib: Path
    lidar: Path
    labels: Path
    disparity: Path = None
    pl: Path = None
    out: Path = None


def _stem_map(directory, suffixes):
    out = {}
    for p in sorted(Path(directory).iterdir()):
        if p.is_file() and p.suffix.lower() in suffixes:
            out.setdefault(p.stem, p)
    return out


def _collect_jobs(args):
    lidar = Path(args.lidar)
    pl_src = args.disparity if args.disparity is not None else args.pl
    if not lidar.is_dir():
        for p in (args.calib, args.labels, pl_src):
            if p is not None and Path(p).is_dir():
                raise StageError("args", f"{p} is a directory but --lidar is a file")
        job = FrameJob(lidar.stem, Path(args.calib), lidar, Path(args.labels), out=Path(args.out))
        if args.disparity is not None:
            job.disparity = Path(args.disparity)
        elif args.pl is not None:
            job.pl = Path(args.pl)
        return [job], []
    for p in (args.calib, args.labels, pl_src):
        if p is not None and not Path(p).is_dir():
            raise StageError("args", f"batch mode needs directories; {p} is not one")
    if Path(args.out).exists() and not Path(args.out).is_dir():
        raise StageError("args", f"batch mode needs an output directory; {args.out} is a file")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    maps = {
        "lidar": _stem_map(lidar, {".bin"}),
        "calib": _stem_map(args.calib, {".txt"}),
        "labels": _stem_map(args.labels, {".txt"}),
    }
    if args.disparity is not None:
        maps["disparity"] = _stem_map(args.disparity, {".png", ".disp", ".bin", ".raw"})
    elif args.pl is not None:
        maps["pl"] = _stem_map(args.pl, {".bin"})
    all_stems = set().union(*maps.values())
    matched = sorted(set.intersection(*(set(m) for m in maps.values())))
    unmatched = sorted(all_stems - set(matched))
    jobs = []
    for stem in matched:
        job = FrameJob(stem, maps["calib"][stem], maps["lidar"][stem], maps["labels"][stem], out=Path(args.out) / f"{stem}.bin")
        job.disparity = maps.get("disparity", {}).get(stem)
        job.pl = maps.get("pl", {}).get(stem)
        jobs.append(job)
    return jobs, unmatched


def run_frame(job, config, args, with_pl=True):
    t0 = time.perf_counter()
    bundle, rig, lidar_to_cam = _stage("calib", parse_calib, job.calib, args.image_size)
    lidar = _stage("lidar", read_velodyne_bin, job.lidar)
    labels = _stage("labels", parse_labels, job.labels)
    if not with_pl:
        pl = PointCloud.empty(CAMERA_FRAME, Source.PSEUDO_LIDAR)
    elif job.disparity is not None:
        disp = _stage("disparity", read_disparity, job.disparity)
        rig = _resize_rig(rig, disp.width, disp.height)
        pl = _stage("pseudolidar", disparity_to_cloud, disp, rig, args.max_depth, args.height_clip)
    else:
        raw = _stage("pl", read_velodyne_bin, job.pl)
        pl = PointCloud(raw.points, raw.intensities, CAMERA_FRAME, Source.PSEUDO_LIDAR)
    image_size = (rig.left.width, rig.left.height)
    detections = detections_from_labels(labels, bundle, image_size)
    t1 = time.perf_counter()
    fused, report = _stage("fuse", fuse_frame, lidar, pl, detections, rig, lidar_to_cam, config)
    _stage("write", write_velodyne_bin, fused, job.out)
    record = {
        "record": "frame",
        "stem": job.stem,
        "status": "ok",
        "inputs": {k: str(v) for k, v in (("calib", job.calib), ("lidar", job.lidar), ("labels", job.labels), ("disparity", job.disparity), ("pl", job.pl)) if v is not None},
        "output": str(job.out),
        "n_lidar": len(lidar),
        "n_pl": len(pl),
        "n_detections": len(detections),
        "report": report.to_dict(timings=False),
        "timing_ms": {"load": 1e3 * (t1 - t0), **report.timing_ms, "total": 1e3 * (time.perf_counter() - t0)},
    }
    return record


def _run_batch(args, config, with_pl):
    jobs, unmatched = _collect_jobs(args)
    for stem in unmatched:
        log.warning("stem %s lacks a complete input set; skipped", stem)
    if not jobs:
        raise StageError("args", "no frames to process")
    t0 = time.perf_counter()

    def guarded(job):
        try:
            return run_frame(job, config, args, with_pl)
        except StageError as exc:
            log.error("frame %s failed: %s", job.stem, exc)
            return {"record": "frame", "stem": job.stem, "status": "failed", "error": str(exc)}

    workers = max(1, min(args.workers, len(jobs)))
    if workers == 1:
        records = [guarded(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(guarded, jobs))
    n_failed = sum(r["status"] != "ok" for r in records)
    header = {
        "record": "run",
        "tool": "frustum-fusion",
        "version": __version__,
        "command": args.command,
        "config": config.to_dict(),
        "max_depth": args.max_depth,
        "height_clip": args.height_clip,
        "unmatched_stems": unmatched,
    }
    summary = {
        "record": "summary",
        "frames": len(records),
        "failed": n_failed,
        "timing_ms": {"wall": 1e3 * (time.perf_counter() - t0)},
    }
    if args.report:
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in [header, *records, summary])
        write_bytes_atomic(args.report, text.encode())
    for r in records:
        if r["status"] == "ok":
            print(f"{r['stem']}: {r['report']['totals']['output_points']} points "
                  f"({r['report']['totals']['pl_points_added']} added)")
    if n_failed == len(records):
        return EXIT_INVALID
    return EXIT_PARTIAL if n_failed else EXIT_OK


def _fusion_config(args):
    try:
        return FusionConfig(
            tau=args.tau,
            near=args.near,
            far=args.far,
            output_mode=args.mode,
            added_intensity=args.added_intensity,
            per_class_tau=args.per_class_tau,
        )
    except ValueError as exc:
        raise StageError("args", str(exc)) from None


def cmd_fuse(args):
    if args.disparity is None and args.pl is None:
        raise StageError("args", "one of --disparity or --pl is required")
    return _run_batch(args, _fusion_config(args), with_pl=True)


def cmd_filter(args):
    args.disparity = args.pl = None
    args.mode = "frustum"
    return _run_batch(args, _fusion_config(args), with_pl=False)


# -------------------------------------------------------------------- report


def cmd_report(args):
    bundle, _, lidar_to_cam = _stage("calib", parse_calib, args.calib, args.image_size)
    cloud = _stage("cloud", read_velodyne_bin, args.cloud)
    labels = [l for l in _stage("labels", parse_labels, args.labels) if not l.ignored]
    pts = cloud.points if args.camera_frame else lidar_to_cam.apply(cloud.points)
    text = metrics_jsonl(density_metrics(pts, labels))
    if args.out:
        write_bytes_atomic(args.out, text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------- bench


def cmd_bench(args):
    if args.points <= 0 or args.queries <= 0:
        raise StageError("bench", "zero queries: --points and --queries must be positive")
    rng = np.random.default_rng(args.seed)
    pts = rng.uniform(-40.0, 40.0, size=(args.points, 3))
    queries = rng.uniform(-40.0, 40.0, size=(args.queries, 3))
    KdIndex(pts[:16]).query_sq(queries[:1])  # warm the JIT cache outside the timings
    build_s, query_s = [], []
    for _ in range(max(1, args.repeat)):
        t0 = time.perf_counter()
        index = KdIndex(pts, args.leaf_size)
        t1 = time.perf_counter()
        d2, idx, visited = index.query_sq(queries)
        t2 = time.perf_counter()
        build_s.append(t1 - t0)
        query_s.append(t2 - t1)
    t0 = time.perf_counter()
    b2, bidx = brute_force_nearest_sq(pts, queries)
    brute_s = time.perf_counter() - t0
    tol = 1e-12 * (1.0 + b2)
    dist_mismatch = int(np.sum(np.abs(d2 - b2) > tol))
    argmin_mismatch = int(np.sum(idx != bidx))
    result = {
        "points": args.points,
        "queries": args.queries,
        "repeat": args.repeat,
        "seed": args.seed,
        "nodes": index.n_nodes,
        "mean_nodes_visited": float(visited.mean()),
        "visited_fraction": float(visited.mean() / args.points),
        "oracle_mismatches": dist_mismatch,
        "argmin_mismatches": argmin_mismatch,
        "build_ms": 1e3 * min(build_s),
        "query_ms": 1e3 * min(query_s),
        "queries_per_s": args.queries / min(query_s),
        "brute_force_ms": 1e3 * brute_s,
        "speedup": brute_s / min(query_s),
    }
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK if dist_mismatch == 0 else EXIT_PARTIAL


# --------------------------------------------------------------------- synth


def cmd_synth(args):
    spec = SceneSpec()
    if args.spec:
        text = _stage("spec", Path(args.spec).read_text)
        spec = _stage("spec", SceneSpec.from_text, text)
    out = Path(args.out_dir)
    dirs = {k: out / k for k in ("calib", "velodyne", "disparity", "label_2")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    ext = ".png" if args.disparity_format == "png" else ".disp"
    for i in range(args.frames):
        seed = args.seed + i
        stem = f"{i:06d}"
        scene = _stage("synth", generate_scene, seed, spec)
        write_calib(scene.calib, dirs["calib"] / f"{stem}.txt")
        write_velodyne_bin(scene.lidar, dirs["velodyne"] / f"{stem}.bin")
        tmp = dirs["disparity"] / f".{stem}{ext}.tmp{ext}"
        _stage("synth", write_disparity, scene.disparity, tmp)
        os.replace(tmp, dirs["disparity"] / f"{stem}{ext}")
        write_labels(scene.labels, dirs["label_2"] / f"{stem}.txt")
        print(f"{stem}: seed={seed} objects={len(scene.labels)} lidar={len(scene.lidar)} pl={len(scene.pl)}")
    write_bytes_atomic(out / "scene_spec.txt", spec.to_text().encode())
    return EXIT_OK


# ---------------------------------------------------------------------- main


def _add_fusion_flags(p):
    p.add_argument("--calib", required=True, help="calibration file or directory")
    p.add_argument("--lidar", required=True, help="scan .bin file or directory")
    p.add_argument("--labels", required=True, help="label file or directory")
    p.add_argument("--tau", type=float, default=0.7, help="fusion distance threshold in metres")
    p.add_argument("--per-class-tau", type=_per_class_tau, default=None, help="'Car=0.6,Cyclist=0.9,Pedestrian=0.7' or 'recommended'")
    p.add_argument("--near", type=float, default=0.5)
    p.add_argument("--far", type=float, default=80.0)
    p.add_argument("--added-intensity", type=float, default=0.0)
    p.add_argument("--max-depth", type=float, default=DEFAULT_MAX_DEPTH)
    p.add_argument("--height-clip", type=float, default=DEFAULT_HEIGHT_CLIP)
    p.add_argument("--out", required=True, help="output scan file or directory")
    p.add_argument("--report", help="manifest path (JSON lines)")
    p.add_argument("--workers", type=int, default=None, help=f"frame worker threads (default ${WORKERS_ENV} or CPU count)")


def build_parser():
    parser = argparse.ArgumentParser(prog="frustum-fusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--image-size", type=_image_size, default=KITTI_IMAGE_SIZE, help="WIDTHxHEIGHT when no disparity map supplies it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="disparity (or depth) map -> pseudo-LiDAR scan")
    p.add_argument("--calib", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--disparity")
    src.add_argument("--depth", help="metric depth map in the disparity file formats")
    p.add_argument("--out", required=True)
    p.add_argument("--max-depth", type=float, default=DEFAULT_MAX_DEPTH)
    p.add_argument("--height-clip", type=float, default=DEFAULT_HEIGHT_CLIP)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("fuse", help="frustum fusion of LiDAR and pseudo-LiDAR")
    _add_fusion_flags(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--disparity", help="disparity map file or directory")
    src.add_argument("--pl", help="pseudo-LiDAR scan (camera frame) file or directory")
    p.add_argument("--mode", choices=["frustum", "scene"], default="frustum")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("filter", help="keep only LiDAR points inside detection frustum intersections")
    _add_fusion_flags(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("report", help="per-box point density as JSON lines")
    p.add_argument("--calib", required=True)
    p.add_argument("--cloud", required=True, help="scan .bin in the LiDAR frame")
    p.add_argument("--labels", required=True)
    p.add_argument("--camera-frame", action="store_true", help="cloud is already in the camera frame")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="KD-index build/query timing against brute force")
    p.add_argument("--points", type=int, default=200_000)
    p.add_argument("--queries", type=int, default=10_000)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--leaf-size", type=int, default=16)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write seeded synthetic frames (calib, scan, disparity, labels)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="scene spec file (key = value lines)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--disparity-format", choices=["png", "raw"], default="png")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "workers", 1) is None:
        args.workers = _default_workers()
    try:
        return args.func(args)
    except StageError as exc:
        print(f"frustum-fusion {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
