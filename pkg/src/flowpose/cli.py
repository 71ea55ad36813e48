"""Command-line entry point.

Subcommands:
  onboard   Render a depth-template set for an object model.
  simulate  Generate a synthetic scene and export it for replay.
  refine    Refine initial pose hypotheses against one frame of a scene.
  track     Track an object through a scene and log per-frame decisions.
  eval      Score an estimated pose CSV against a ground-truth CSV.

All randomness flows from an explicit seed (flag, config key, or the
FLOWPOSE_SEED environment variable), so every subcommand writes
bit-identical outputs on repeated runs, regardless of --threads
(parallel work is collected in deterministic order). FLOWPOSE_THREADS
overrides the default thread count.

Exit codes: 0 success, 2 bad input or configuration, 3 algorithm failure
(no consensus, failed initialization).

File formats:
  pose CSV      header ``scene_id,im_id,obj_id,score,R,t,time``; R is 9
                space-separated row-major values, t is 3 values in mm,
                17 significant digits so float64 round-trips exactly.
  decision log  tab-separated ``frame m2f_triggered inlier_ratio quality``
                plus ``rot_deg_err trans_mm_err`` columns when GT is known.
  configs       flat ``key = value`` text; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import correspondence as corr_io
from .errors import (
    AllIterationsFailed,
    ConfigError,
    EmptyRender,
    FlowPoseError,
    InitializationBehindCamera,
    InitializationFailed,
    NoConsensus,
)
from .geometry import CameraIntrinsics, CropCamera, Pose, check_rotation
from .metrics import run_reset_protocol
from .onboarding import (
    build_template_set,
    read_object_model,
    save_template_set,
    load_template_set,
    splat_depth,
    write_object_model,
)
from .oracle import (
    OracleFlowProvider,
    OracleFrameFlowProvider,
    OracleFrame,
    SceneSpec,
    generate_sequence,
    oracle_f2f_flow,
    oracle_m2f_flow,
    read_scene_spec,
    write_scene_spec,
)
from .pnp import RansacConfig
from .refine import RefineConfig, refine_pose, select_best
from .tracking import TrackerConfig, track_sequence
from .correspondence import Template
from .geometry import pose_in_crop

_FMT = "%.17g"


def _fmt(values) -> str:
    return " ".join(_FMT % v for v in np.asarray(values, dtype=float).ravel())


def _env_seed(default: int) -> int:
    raw = os.environ.get("FLOWPOSE_SEED")
    return int(raw) if raw else default


def _env_threads(default: int) -> int:
    raw = os.environ.get("FLOWPOSE_THREADS")
    return int(raw) if raw else default


def write_pose_csv(path, rows) -> None:
    """Rows of (scene_id, im_id, obj_id, score, pose, seconds)."""
    lines = ["scene_id,im_id,obj_id,score,R,t,time"]
    for scene_id, im_id, obj_id, score, pose, seconds in rows:
        lines.append(
            f"{scene_id},{im_id},{obj_id},{_FMT % score},"
            f"{_fmt(pose.rotation)},{_fmt(pose.translation)},{_FMT % seconds}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pose_csv(path) -> list:
    """Parse rows written by :func:`write_pose_csv`."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "scene_id,im_id,obj_id,score,R,t,time":
            raise ConfigError(f"{path}: unexpected pose CSV header")
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ConfigError(f"{path}:{ln}: expected 7 comma-separated fields")
            r = [float(v) for v in parts[4].split()]
            t = [float(v) for v in parts[5].split()]
            if len(r) != 9 or len(t) != 3:
                raise ConfigError(f"{path}:{ln}: malformed R or t field")
            rows.append(
                {
                    "scene_id": int(parts[0]),
                    "im_id": int(parts[1]),
                    "obj_id": int(parts[2]),
                    "score": float(parts[3]),
                    "pose": Pose(np.array(r).reshape(3, 3), np.array(t)),
                    "time": float(parts[6]),
                }
            )
    return rows


def read_pose_lines(path) -> list:
    """Plain pose text: one pose per line, 12 floats (row-major R, then t)."""
    poses = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            v = [float(x) for x in line.split()]
            if len(v) != 12:
                raise ConfigError(f"{path}:{ln}: poses need 12 floats per line")
            poses.append(Pose(np.array(v[:9]).reshape(3, 3), np.array(v[9:])))
    if not poses:
        raise ConfigError(f"{path}: contains no poses")
    return poses


def _read_kv(path) -> dict:
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key = value")
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


_REFINE_KEYS = {
    "iterations": int,
    "tau_v": float,
    "crop_size": int,
    "pad": float,
    "splat_radius": float,
    "max_correspondences": int,
    "seed": int,
    "online_rendering": lambda s: s.lower() in ("1", "true", "yes"),
    "ransac_iterations": int,
    "reproj_threshold_px": float,
    "min_inliers": int,
    "confidence": float,
}

_TRACKER_KEYS = {
    "tau_i": float,
    "mix_ratio": float,
    "reacquire_horizon": int,
    "propagation_enabled": lambda s: s.lower() in ("1", "true", "yes"),
}


def _configs_from_file(path, allow_tracker: bool):
    """Build (RefineConfig, TrackerConfig or None) from a key=value file."""
    raw = _read_kv(path) if path else {}
    refine_kwargs = {}
    ransac_kwargs = {}
    tracker_kwargs = {}
    for key, val in raw.items():
        if key in ("ransac_iterations", "reproj_threshold_px", "min_inliers", "confidence"):
            name = {"ransac_iterations": "max_iterations", "confidence": "confidence_early_exit"}.get(key, key)
            ransac_kwargs[name] = _REFINE_KEYS[key](val)
        elif key in _REFINE_KEYS:
            refine_kwargs[key] = _REFINE_KEYS[key](val)
        elif allow_tracker and key in _TRACKER_KEYS:
            tracker_kwargs[key] = _TRACKER_KEYS[key](val)
        else:
            raise ConfigError(f"{path}: unknown config key {key!r}")
    try:
        if ransac_kwargs:
            seed = refine_kwargs.get("seed", 0)
            refine_kwargs["ransac"] = RansacConfig(seed=seed, **ransac_kwargs)
        refine_cfg = RefineConfig(**refine_kwargs)
        tracker_cfg = None
        if allow_tracker:
            tracker_cfg = TrackerConfig(
                refine=refine_cfg,
                seed=refine_cfg.seed,
                max_correspondences=refine_cfg.max_correspondences,
                **tracker_kwargs,
            )
        return refine_cfg, tracker_cfg
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- scene I/O

def _load_scene(args):
    """(model, frames, spec) from --scene spec or --replay directory."""
    if getattr(args, "replay", None):
        model, frames = load_replay(args.replay)
        spec = read_scene_spec(os.path.join(args.replay, "spec.txt"))
        return model, frames, spec
    spec = read_scene_spec(args.scene)
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace as _replace

        spec = _replace(spec, seed=args.seed)
    model, frames = generate_sequence(spec)
    return model, frames, spec


def export_replay(directory, spec: SceneSpec, model, frames, flow_pairs: int = 1) -> None:
    """Write a scene to disk so `track --replay` can run without regenerating.

    Layout: ``spec.txt`` (the scene spec), ``model.objpts``, ``index.txt``
    with one line per frame (pose, crop rotation, crop focal), per-frame
    ``zbuffer_*.vis`` and ``occluded_*.vis`` grids, plus demonstration flow
    fields for the first ``flow_pairs`` consecutive frame pairs
    (``f2f_*.flw``) and the frame-0 template flow (``m2f_0.flw`` /
    ``m2f_vis_0.vis``).
    """
    os.makedirs(directory, exist_ok=True)
    write_scene_spec(os.path.join(directory, "spec.txt"), spec)
    write_object_model(os.path.join(directory, "model.objpts"), model)
    lines = [f"SCENE {len(frames)} {frames[0].crop.intrinsics.width}"]
    for fr in frames:
        lines.append(
            f"frame {fr.index} "
            + _fmt(np.concatenate([fr.gt_pose.rotation.ravel(), fr.gt_pose.translation]))
            + " "
            + _fmt(fr.crop.rotation_to_source)
            + " "
            + (_FMT % fr.crop.intrinsics.fx)
        )
        corr_io.write_grid(
            os.path.join(directory, f"zbuffer_{fr.index:04d}.vis"), fr.zbuffer
        )
        corr_io.write_grid(
            os.path.join(directory, f"occluded_{fr.index:04d}.vis"),
            fr.occluded.astype(float),
        )
    with open(os.path.join(directory, "index.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    write_pose_csv(
        os.path.join(directory, "gt_poses.csv"),
        [(0, fr.index, 0, 1.0, fr.gt_pose, 0.0) for fr in frames],
    )

    for i in range(min(flow_pairs, len(frames) - 1)):
        flow = oracle_f2f_flow(frames[i], frames[i + 1])
        corr_io.write_flow(os.path.join(directory, f"f2f_{i:04d}.flw"), flow)
    if frames:
        fr = frames[0]
        depth = splat_depth(model, pose_in_crop(fr.gt_pose, fr.crop), fr.crop.intrinsics)
        template = Template.from_depth(
            pose_in_crop(fr.gt_pose, fr.crop), fr.crop.intrinsics, depth
        )
        flow, vis = oracle_m2f_flow(template, fr)
        corr_io.write_flow(os.path.join(directory, "m2f_0.flw"), flow)
        corr_io.write_visibility(os.path.join(directory, "m2f_vis_0.vis"), vis)


def load_replay(directory):
    """Rebuild (model, frames) from an exported scene directory.

    Grids come back f32-quantized (the on-disk format width), which is why
    replay is still deterministic: every consumer sees the same quantized
    buffers.
    """
    model = read_object_model(os.path.join(directory, "model.objpts"))
    frames = []
    with open(os.path.join(directory, "index.txt")) as fh:
        head = fh.readline().split()
        if len(head) != 3 or head[0] != "SCENE":
            raise ConfigError(f"{directory}: malformed replay index")
        count = int(head[1])
        size = int(head[2])
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] != "frame" or len(parts) != 2 + 12 + 9 + 1:
                raise ConfigError(f"{directory}: malformed frame line")
            idx = int(parts[1])
            vals = [float(v) for v in parts[2:]]
            pose = Pose(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:12]))
            rot = check_rotation(np.array(vals[12:21]).reshape(3, 3))
            f = vals[21]
            intr = CameraIntrinsics(f, f, size / 2.0, size / 2.0, size, size)
            zbuffer = corr_io.read_grid(
                os.path.join(directory, f"zbuffer_{idx:04d}.vis")
            )
            occluded = (
                corr_io.read_grid(os.path.join(directory, f"occluded_{idx:04d}.vis"))
                > 0.5
            )
            visible = np.zeros(len(model.points), dtype=bool)
            frames.append(
                OracleFrame(idx, pose, CropCamera(intr, rot), zbuffer, occluded, visible)
            )
    if len(frames) != count:
        raise ConfigError(f"{directory}: index declares {count} frames, found {len(frames)}")
    return model, frames


# ---------------------------------------------------------------- commands

def cmd_onboard(args) -> int:
    model = read_object_model(args.model)
    tset = build_template_set(
        model,
        count=args.templates,
        crop_size=args.crop_size,
        threads=_env_threads(args.threads),
    )
    save_template_set(args.out, tset)
    print(f"onboarded {len(tset)} templates -> {args.out}")
    return 0


def cmd_simulate(args) -> int:
    spec = read_scene_spec(args.scene)
    if args.seed is not None:
        from dataclasses import replace as _replace

        spec = _replace(spec, seed=args.seed)
    model, frames = generate_sequence(spec)
    export_replay(args.out, spec, model, frames, flow_pairs=args.flow_pairs)
    print(f"simulated {len(frames)} frames -> {args.out}")
    return 0


def cmd_refine(args) -> int:
    refine_cfg, _ = _configs_from_file(args.config, allow_tracker=False)
    if args.seed is not None:
        from dataclasses import replace as _replace

        refine_cfg = _replace(refine_cfg, seed=args.seed)
    model, frames, spec = _load_scene(args)
    hypotheses = read_pose_lines(args.init)
    provider = OracleFlowProvider(frames, noise=spec.noise, seed=spec.seed)
    template_set = load_template_set(args.templates) if args.templates else None
    if template_set is not None:
        from dataclasses import replace as _replace

        refine_cfg = _replace(refine_cfg, online_rendering=False)
    camera = spec.camera

    # Default time column is -1 (unmeasured) so output is bit-identical
    # across runs and thread counts; --measure-time opts into wall clock.
    def run_one(pose):
        start = time.perf_counter()
        outcome = refine_pose(
            pose,
            None,
            camera,
            model,
            provider,
            refine_cfg,
            template_set=template_set,
            frame_index=args.frame,
        )
        seconds = time.perf_counter() - start if args.measure_time else -1.0
        return outcome, seconds

    threads = _env_threads(args.threads)
    results = []
    failures = []
    if threads > 1 and len(hypotheses) > 1:
        from concurrent.futures import ThreadPoolExecutor

        def safe(pose):
            try:
                return run_one(pose)
            except (AllIterationsFailed, InitializationBehindCamera, NoConsensus) as exc:
                return exc

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for res in pool.map(safe, hypotheses):
                (failures if isinstance(res, Exception) else results).append(res)
    else:
        for pose in hypotheses:
            try:
                results.append(run_one(pose))
            except (AllIterationsFailed, InitializationBehindCamera, NoConsensus) as exc:
                failures.append(exc)

    if not results:
        print(f"refine failed for all hypotheses: {failures[0]}", file=sys.stderr)
        return 3

    best = select_best([outcome for outcome, _ in results])
    os.makedirs(args.out, exist_ok=True)
    rows = [
        (0, args.frame, 0, outcome.quality, outcome.pose, seconds)
        for outcome, seconds in results
    ]
    write_pose_csv(os.path.join(args.out, "poses.csv"), rows)
    log_lines = []
    for h, (outcome, _) in enumerate(results):
        mark = " selected" if h == best else ""
        log_lines.append(f"hypothesis {h}{mark}")
        for it, rec in enumerate(outcome.per_iteration):
            log_lines.append(
                f"  iteration {it}: quality {_FMT % rec.quality} "
                f"inliers {rec.inlier_count}"
            )
    with open(os.path.join(args.out, "iterations.log"), "w") as fh:
        fh.write("\n".join(log_lines) + "\n")
    print(
        f"refined {len(results)}/{len(hypotheses)} hypotheses, "
        f"best quality {results[best][0].quality:.4f} -> {args.out}"
    )
    return 0


def cmd_track(args) -> int:
    refine_cfg, tracker_cfg = _configs_from_file(args.config, allow_tracker=True)
    if args.seed is not None:
        from dataclasses import replace as _replace

        refine_cfg = _replace(refine_cfg, seed=args.seed)
        tracker_cfg = _replace(tracker_cfg, refine=refine_cfg, seed=args.seed)
    model, frames, spec = _load_scene(args)
    camera = spec.camera
    init = read_pose_lines(args.init)[0]
    m2f = OracleFlowProvider(frames, noise=spec.noise, seed=spec.seed)
    f2f = OracleFrameFlowProvider(frames, noise=spec.noise, seed=spec.seed)
    start = time.perf_counter()
    decisions = track_sequence(
        range(len(frames)), init, model, camera, m2f, f2f, tracker_cfg
    )
    elapsed = time.perf_counter() - start

    os.makedirs(args.out, exist_ok=True)
    # Both scene generation and replay carry GT poses, so the error columns
    # are always available here; real captures would drop them.
    from .metrics import pose_delta

    lines = ["frame\tm2f_triggered\tinlier_ratio\tquality\trot_deg_err\ttrans_mm_err"]
    for dec, frame in zip(decisions, frames):
        rot, trans = pose_delta(dec.pose, frame.gt_pose)
        lines.append(
            f"{dec.frame_index}\t{int(dec.used_registration)}\t"
            f"{_FMT % dec.inlier_ratio}\t{_FMT % dec.quality}\t"
            f"{_FMT % rot}\t{_FMT % trans}"
        )
    with open(os.path.join(args.out, "decisions.tsv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    per_frame_time = elapsed / max(len(decisions), 1)
    row_time = per_frame_time if args.measure_time else -1.0
    write_pose_csv(
        os.path.join(args.out, "poses.csv"),
        [
            (0, dec.frame_index, 0, dec.quality, dec.pose, row_time)
            for dec in decisions
        ],
    )
    lost = sum(1 for d in decisions if d.lost)
    if args.measure_time:
        print(f"tracked {len(decisions)} frames ({lost} lost, "
              f"{per_frame_time * 1e3:.1f} ms/frame) -> {args.out}")
    else:
        print(f"tracked {len(decisions)} frames ({lost} lost) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    est_rows = read_pose_csv(args.est)
    gt_rows = read_pose_csv(args.gt)
    model = read_object_model(args.model) if args.model else None
    if len(est_rows) != len(gt_rows):
        print(
            f"eval: estimate rows ({len(est_rows)}) != gt rows ({len(gt_rows)})",
            file=sys.stderr,
        )
        return 2
    report = run_reset_protocol(
        [r["pose"] for r in est_rows],
        [r["pose"] for r in gt_rows],
        model=model,
        cam=None,
    )
    lines = []
    for i, pe in enumerate(report.per_frame):
        row = f"frame {i} rot_deg {_FMT % pe.rot_deg} trans_mm {_FMT % pe.trans_mm}"
        if pe.add_mm is not None:
            row += f" add_mm {_FMT % pe.add_mm} adds_mm {_FMT % pe.adds_mm}"
        lines.append(row)
    summary = [
        f"frames {len(report.per_frame)}",
        f"resets {report.resets}",
        f"cm_deg_rate {report.cm_deg_rate:.4f}",
    ]
    if report.auc_add is not None:
        summary.append(f"auc_add {report.auc_add:.4f}")
        summary.append(f"auc_adds {report.auc_adds:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines + summary) + "\n")
    print("\n".join(summary))
    return 0


# ---------------------------------------------------------------- parser

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowpose", description="Flow-based 6DoF pose refinement and tracking."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("onboard", help="render a depth-template set")
    p.add_argument("--model", required=True, help="OBJPTS model file")
    p.add_argument("--templates", type=int, default=800, help="template count")
    p.add_argument("--crop-size", type=int, default=280)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_onboard)

    p = sub.add_parser("simulate", help="generate and export a synthetic scene")
    p.add_argument("--scene", required=True, help="scene spec file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--flow-pairs", type=int, default=1,
                   help="consecutive frame pairs to export flow fields for")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("refine", help="refine pose hypotheses on one frame")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="scene spec file")
    src.add_argument("--replay", help="exported scene directory")
    p.add_argument("--init", required=True, help="initial pose hypotheses file")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--templates", default=None,
                   help="template-set directory (switches to offline rendering)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--measure-time", action="store_true",
                   help="record wall-clock time (breaks bit-determinism)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("track", help="track through a scene")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="scene spec file")
    src.add_argument("--replay", help="exported scene directory")
    p.add_argument("--init", required=True, help="initial pose file (first line used)")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--measure-time", action="store_true",
                   help="record wall-clock time (breaks bit-determinism)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score estimates against ground truth")
    p.add_argument("--est", required=True, help="estimated pose CSV")
    p.add_argument("--gt", required=True, help="ground-truth pose CSV")
    p.add_argument("--model", default=None, help="OBJPTS model for ADD metrics")
    p.add_argument("--out", default=None, help="per-frame report file")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None and os.environ.get("FLOWPOSE_SEED"):
        args.seed = _env_seed(0)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"flowpose: {exc}", file=sys.stderr)
        return 2
    except (InitializationFailed, AllIterationsFailed, NoConsensus, EmptyRender) as exc:
        print(f"flowpose: {exc}", file=sys.stderr)
        return 3
    except FlowPoseError as exc:
        print(f"flowpose: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
