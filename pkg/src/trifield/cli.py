"""Command-line orchestrator: init | extend | render | eval.

Each run lives in an explicit run directory holding a resolved copy of the
config, the keyframe database (PNG/PFM/poses), one checkpoint per field block,
and a manifest describing every artifact. Exit codes: 0 success, 2 usage or
input error, 3 corrupt state, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import torch

from . import io, metrics, synth
from .camera import Intrinsics, Pose, SphericalOffset, load_trajectory, save_trajectory
from .config import RunConfig, mix_seed, torch_generator
from .dibr import (ConstantHoleFiller, Keyframe, NearestHoleFiller,
                   OracleHoleFiller, build_supporting_database)
from .field import Bounds, CheckpointError, TriPlaneField, load_field, save_field
from .metrics import MetricReport
from .refine import make_refiner
from .render import NonFiniteDensityError, RenderConfig, render_view
from .synth import OracleScene, oracle_flow, render_oracle
from .train import (DatabaseEntry, DivergenceError, NonFiniteGradientError,
                    SceneState, TrainConfig, extend_scene, make_entry, train_initial)

FORMAT_VERSIONS = {"pfm": 1, "png": 1, "checkpoint": 1, "report": 1, "state": 1}

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CORRUPT = 3
EXIT_NUMERIC = 4


class UsageError(ValueError):
    pass


# -- run directory layout -------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    seed: int
    threads: int
    config: dict
    format_versions: dict = dataclass_field(default_factory=lambda: dict(FORMAT_VERSIONS))
    artifacts: list[str] = dataclass_field(default_factory=list)
    timings: dict = dataclass_field(default_factory=dict)
    blocks: int = 1
    frames: int = 0
    warnings: int = 0

    def write(self, run_dir: Path) -> None:
        """Atomic write: serialize to a temp file, then rename over the target."""
        self.artifacts = sorted(set(self.artifacts))
        payload = json.dumps(self.__dict__, sort_keys=True, indent=1, default=str)
        tmp = run_dir / "manifest.json.tmp"
        tmp.write_text(payload + "\n")
        tmp.replace(run_dir / "manifest.json")


def _collect_artifacts(run_dir: Path) -> list[str]:
    return sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                  if p.is_file() and p.name != "manifest.json.tmp")


def save_state(run_dir: Path, state: SceneState, cfg: RunConfig) -> None:
    db = run_dir / "database"
    blocks = run_dir / "blocks"
    db.mkdir(parents=True, exist_ok=True)
    blocks.mkdir(parents=True, exist_ok=True)
    poses = []
    lines: dict[str, object] = {
        "active_block": state.active_block,
        "window": state.window,
        "extended_frames": state.extended_frames,
        "entries": len(state.entries),
        "blocks": len(state.blocks),
    }
    for i, entry in enumerate(state.entries):
        kf = entry.keyframe
        io.write_image_png(db / f"frame_{i:03d}.png", kf.image)
        io.write_depth_pfm(db / f"depth_{i:03d}.pfm", kf.depth)
        io.write_mask_png(db / f"mask_{i:03d}.png", kf.valid_mask)
        io.write_pfm(db / f"cache_{i:03d}.pfm", entry.loss_cache)
        poses.append(kf.pose)
        lines[f"entry.{i:03d}.depth_supervised"] = entry.depth_supervised
        lines[f"entry.{i:03d}.has_cache"] = entry.has_cache
        lines[f"entry.{i:03d}.blocks"] = " ".join(str(b) for b in sorted(entry.blocks))
    save_trajectory(db / "poses.txt", poses, header="database keyframe poses")
    for b, block in enumerate(state.blocks):
        save_field(blocks / f"block_{b:03d}.tpf", block)
    io.write_kv_file(run_dir / "state.txt", lines)


def load_state(run_dir: Path, cfg: RunConfig) -> SceneState:
    state_file = run_dir / "state.txt"
    if not state_file.exists():
        raise UsageError(f"{run_dir} is not a run directory (missing state.txt)")
    kv = io.read_kv_file(state_file)
    n_entries = int(kv["entries"])
    n_blocks = int(kv["blocks"])
    db = run_dir / "database"
    poses = load_trajectory(db / "poses.txt")
    if len(poses) != n_entries:
        raise CheckpointError("database pose count disagrees with state.txt")
    entries = []
    for i in range(n_entries):
        keyframe = Keyframe(image=io.read_image_png(db / f"frame_{i:03d}.png"),
                            depth=io.read_depth_pfm(db / f"depth_{i:03d}.pfm"),
                            pose=poses[i],
                            valid_mask=io.read_mask_png(db / f"mask_{i:03d}.png"))
        entry = DatabaseEntry(
            keyframe=keyframe,
            loss_cache=io.read_pfm(db / f"cache_{i:03d}.pfm").astype(np.float32),
            has_cache=io.kv_bool(kv[f"entry.{i:03d}.has_cache"]),
            depth_supervised=io.kv_bool(kv[f"entry.{i:03d}.depth_supervised"]),
            blocks={int(tok) for tok in kv[f"entry.{i:03d}.blocks"].split()})
        entries.append(entry)
    blocks = [load_field(run_dir / "blocks" / f"block_{b:03d}.tpf",
                         l_pos=cfg.l_pos, l_dir=cfg.l_dir, dtype=cfg.torch_dtype())
              for b in range(n_blocks)]
    camera = Intrinsics.from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg)
    state = SceneState(blocks=blocks, entries=entries, camera=camera,
                       active_block=int(kv["active_block"]), window=int(kv["window"]),
                       extended_frames=int(kv.get("extended_frames", "0")))
    state.validate()
    return state


# -- shared setup ----------------------------------------------------------------

def _resolve_threads(args, cfg: RunConfig) -> int:
    if args.threads is not None:
        threads = args.threads
    elif os.environ.get("ENGINE_THREADS"):
        threads = int(os.environ["ENGINE_THREADS"])
    else:
        threads = cfg.threads
    if threads > 0:
        torch.set_num_threads(threads)
    return torch.get_num_threads()

def _load_scene(cfg: RunConfig) -> OracleScene | None:
    if not cfg.scene:
        return None
    path = Path(cfg.scene)
    if not path.exists():
        raise UsageError(f"scene file not found: {path}")
    return synth.load_scene(path)


def _background(cfg: RunConfig, scene: OracleScene | None) -> tuple[float, float, float]:
    if cfg.background.strip() == "scene":
        return tuple(scene.background) if scene else (0.0, 0.0, 0.0)
    values = io.kv_floats(cfg.background)
    if len(values) != 3:
        raise UsageError(f"background must be 'scene' or three numbers, got {cfg.background!r}")
    return values


def _render_config(cfg: RunConfig, scene: OracleScene | None) -> RenderConfig:
    return RenderConfig(n_samples=cfg.n_samples, t_near=cfg.t_near, t_far=cfg.t_far,
                        background=_background(cfg, scene), jitter=False,
                        chunk_size=cfg.chunk_size)


def _train_config(cfg: RunConfig, scene: OracleScene | None) -> TrainConfig:
    return TrainConfig(render=_render_config(cfg, scene), batch_size=cfg.batch_size,
                       lambda_start=cfg.lambda_start, lambda_end=cfg.lambda_end,
                       lr_peak=cfg.lr_peak, lr_final=cfg.lr_final, warmup=cfg.warmup,
                       clip=cfg.clip, incremental_iters=cfg.incremental_iters,
                       incremental_warmup=cfg.incremental_warmup,
                       incremental_batch=cfg.incremental_batch,
                       plane_init=cfg.plane_init, density_bias=cfg.density_bias,
                       seed=cfg.seed)


def _initial_keyframe(cfg: RunConfig, scene: OracleScene | None,
                      camera: Intrinsics) -> Keyframe:
    if scene is not None:
        return render_oracle(scene, Pose.identity(), camera)
    if not cfg.image or not cfg.depth:
        raise UsageError("config needs either a scene file or an image + depth pair")
    image_path, depth_path = Path(cfg.image), Path(cfg.depth)
    if not image_path.exists() or not depth_path.exists():
        raise UsageError("input image or depth file not found")
    image = io.read_image_png(image_path)
    depth = io.read_depth_pfm(depth_path)
    if image.shape[:2] != (camera.height, camera.width):
        raise UsageError(f"input image is {image.shape[:2]}, config says "
                         f"{(camera.height, camera.width)}")
    valid = np.isfinite(depth) & (depth > 0)
    return Keyframe(image=image, depth=np.where(valid, depth, np.inf),
                    pose=Pose.identity(), valid_mask=valid)


def _make_filler(cfg: RunConfig, scene: OracleScene | None):
    name = cfg.hole_filler
    if name == "auto":
        name = "oracle" if scene is not None else "nearest"
    if name == "oracle":
        if scene is None:
            raise UsageError("oracle hole filler needs a scene file")
        return OracleHoleFiller(scene)
    if name == "nearest":
        return NearestHoleFiller()
    if name == "constant":
        return ConstantHoleFiller()
    raise UsageError(f"unknown hole filler {cfg.hole_filler!r}")


def _neighbor_offsets(cfg: RunConfig) -> list[SphericalOffset]:
    theta = math.radians(cfg.neighbor_theta_deg)
    offsets = []
    for i in range(cfg.neighbor_count):
        phi = -math.pi + 2.0 * math.pi * (i + 0.5) / cfg.neighbor_count
        offsets.append(SphericalOffset(theta=theta, phi=phi, r=cfg.neighbor_radius))
    return offsets


def _initial_view_psnrs(state: SceneState, render_cfg: RenderConfig,
                        count: int) -> list[float]:
    """PSNR of the current model against the first `count` database images."""
    values = []
    for entry in state.entries[:count]:
        view = render_view(state.blocks, entry.keyframe.pose, state.camera, render_cfg)
        values.append(metrics.psnr(view.image, entry.keyframe.image))
    return values


# -- subcommands ----------------------------------------------------------------

def cmd_init(args) -> int:
    t0 = time.perf_counter()
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    threads = _resolve_threads(args, cfg)
    scene = _load_scene(cfg)
    camera = Intrinsics.from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    initial = _initial_keyframe(cfg, scene, camera)
    offsets = _neighbor_offsets(cfg)
    filler = _make_filler(cfg, scene)
    look_at = cfg.look_at_distance if cfg.look_at_distance > 0 else None
    keyframes = build_supporting_database(initial, camera, offsets, filler,
                                          footprint_radius=cfg.footprint_radius,
                                          look_at_distance=look_at)
    t_db = time.perf_counter()

    generator = torch_generator(mix_seed(cfg.seed, "block", 0))
    block = TriPlaneField.create(
        resolution=cfg.plane_resolution, d=cfg.feature_dim, hidden=cfg.hidden,
        layers=cfg.layers, bounds=Bounds.cube(initial.pose.center, cfg.block_half_extent),
        generator=generator, dtype=cfg.torch_dtype(), l_pos=cfg.l_pos, l_dir=cfg.l_dir,
        plane_init=cfg.plane_init, density_bias=cfg.density_bias)
    state = SceneState(blocks=[block],
                       entries=[make_entry(kf, depth_supervised=True, block=0)
                                for kf in keyframes],
                       camera=camera, window=cfg.window)
    train_cfg = _train_config(cfg, scene)
    train_initial(state, cfg.init_iters, train_cfg)
    t_train = time.perf_counter()

    cfg.save(run_dir / "config.txt")
    save_state(run_dir, state, cfg)
    init_psnrs = _initial_view_psnrs(state, train_cfg.render, len(state.entries))
    report = {"initial_psnr_mean": float(np.mean(init_psnrs))}
    for i, v in enumerate(init_psnrs):
        report[f"initial_psnr.{i:03d}"] = v
    (run_dir / "init_metrics.json").write_text(
        json.dumps(report, sort_keys=True, indent=1) + "\n")
    t_end = time.perf_counter()

    manifest = RunManifest(command="init", seed=cfg.seed, threads=threads,
                           config=cfg.to_kv(), blocks=len(state.blocks),
                           frames=len(state.entries),
                           timings={"database_s": t_db - t0,
                                    "train_s": t_train - t_db,
                                    "total_s": t_end - t0})
    manifest.artifacts = _collect_artifacts(run_dir)
    manifest.write(run_dir)
    print(f"init: {len(state.entries)} keyframes, {cfg.init_iters} iterations, "
          f"initial-view PSNR {report['initial_psnr_mean']:.2f} dB")
    return EXIT_OK


def cmd_extend(args) -> int:
    t0 = time.perf_counter()
    run_dir = Path(args.run_dir)
    config_path = run_dir / "config.txt"
    if not config_path.exists():
        raise UsageError(f"{run_dir} has no config.txt (run init first)")
    cfg = RunConfig.load(config_path)
    if args.seed is not None:
        cfg.seed = args.seed
    threads = _resolve_threads(args, cfg)
    scene = _load_scene(cfg)
    poses = load_trajectory(args.trajectory)
    state = load_state(run_dir, cfg)
    train_cfg = _train_config(cfg, scene)

    refiner_name = args.refiner or cfg.refiner
    refiner = make_refiner(refiner_name, scene=scene, camera=state.camera,
                           tau=cfg.lowalpha_tau)

    renders_dir = run_dir / "renders"
    refined_dir = run_dir / "refined"
    renders_dir.mkdir(exist_ok=True)
    refined_dir.mkdir(exist_ok=True)
    warnings_count = 0
    frame_records = []
    for pose in poses:
        index = state.extended_frames
        try:
            result = extend_scene(state, pose, refiner, state.camera, train_cfg)
        except (DivergenceError, NonFiniteGradientError, NonFiniteDensityError):
            raise
        except Exception as exc:
            print(f"warning: frame {index} skipped: {exc}", file=sys.stderr)
            warnings_count += 1
            continue
        io.write_image_png(renders_dir / f"frame_{index:03d}.png", result.rendered.image)
        io.write_depth_pfm(renders_dir / f"depth_{index:03d}.pfm", result.rendered.depth)
        io.write_gray_png(renders_dir / f"alpha_{index:03d}.png", result.rendered.alpha)
        io.write_image_png(refined_dir / f"frame_{index:03d}.png", result.refined.image)
        frame_records.append({"frame": index, "block": state.active_block,
                              "spawned": result.spawned_block})

    save_trajectory(run_dir / "trajectory.txt",
                    [state.entries[i].keyframe.pose
                     for i in range(len(state.entries) - state.extended_frames,
                                    len(state.entries))],
                    header="extended trajectory (poses actually added)")
    save_state(run_dir, state, cfg)
    summary = {
        "frames": state.extended_frames,
        "blocks": len(state.blocks),
        "warnings": warnings_count,
        "refiner": refiner_name,
    }
    for record in frame_records:
        summary[f"frame.{record['frame']:03d}.block"] = record["block"]
    (run_dir / "extend_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1) + "\n")

    manifest = RunManifest(command="extend", seed=cfg.seed, threads=threads,
                           config=cfg.to_kv(), blocks=len(state.blocks),
                           frames=state.extended_frames, warnings=warnings_count,
                           timings={"total_s": time.perf_counter() - t0})
    manifest.artifacts = _collect_artifacts(run_dir)
    manifest.write(run_dir)
    print(f"extend: {len(poses)} poses processed, {warnings_count} skipped, "
          f"{len(state.blocks)} blocks")
    return EXIT_OK


def cmd_render(args) -> int:
    t0 = time.perf_counter()
    run_dir = Path(args.run_dir)
    cfg = RunConfig.load(run_dir / "config.txt")
    threads = _resolve_threads(args, cfg)
    scene = _load_scene(cfg)
    state = load_state(run_dir, cfg)
    poses = load_trajectory(args.trajectory)
    out_dir = Path(args.out) if args.out else run_dir / "renders_eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    render_cfg = _render_config(cfg, scene)
    for i, pose in enumerate(poses):
        view = render_view(state.blocks, pose, state.camera, render_cfg)
        io.write_image_png(out_dir / f"frame_{i:03d}.png", view.image)
        io.write_depth_pfm(out_dir / f"depth_{i:03d}.pfm", view.depth)
        io.write_gray_png(out_dir / f"alpha_{i:03d}.png", view.alpha)
    manifest = RunManifest(command="render", seed=cfg.seed, threads=threads,
                           config=cfg.to_kv(), blocks=len(state.blocks),
                           frames=len(poses),
                           timings={"total_s": time.perf_counter() - t0})
    manifest.artifacts = _collect_artifacts(run_dir)
    manifest.write(run_dir)
    print(f"render: {len(poses)} views written to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    run_dir = Path(args.run_dir)
    cfg = RunConfig.load(run_dir / "config.txt")
    threads = _resolve_threads(args, cfg)
    scene = _load_scene(cfg)
    state = load_state(run_dir, cfg)
    renders_dir = run_dir / "renders"
    trajectory_path = run_dir / "trajectory.txt"
    frames: list[np.ndarray] = []
    depths: list[np.ndarray] = []
    poses: list[Pose] = []
    if trajectory_path.exists():
        poses = load_trajectory(trajectory_path)
        for i in range(len(poses)):
            frame_path = renders_dir / f"frame_{i:03d}.png"
            if not frame_path.exists():
                raise UsageError(f"missing render {frame_path}")
            frames.append(io.read_image_png(frame_path))
            depths.append(io.read_depth_pfm(renders_dir / f"depth_{i:03d}.pfm"))
    if not frames:
        raise UsageError("no extended frames to evaluate (run extend first)")

    report = MetricReport()
    render_cfg = _render_config(cfg, scene)
    if scene is not None:
        oracle_frames = [render_oracle(scene, pose, state.camera) for pose in poses]
        for frame, depth, kf in zip(frames, depths, oracle_frames):
            report.psnr_per_frame.append(metrics.psnr(frame, kf.image))
            mask = kf.valid_mask & np.isfinite(depth) & (depth > 0)
            report.depth_error_per_frame.append(metrics.depth_error(depth, kf.depth, mask))
        report.psnr = float(np.mean(report.psnr_per_frame))
        report.depth_error = float(np.mean(report.depth_error_per_frame))
        flows, occs = [], []
        for a, b in zip(poses[:-1], poses[1:]):
            flow, occ = oracle_flow(scene, a, b, state.camera)
            flows.append(flow)
            occs.append(~occ)
        if flows:
            per_pair = [metrics.flow_warp_error(frames[t:t + 2], [flows[t]], [occs[t]])
                        for t in range(len(flows))]
            report.flow_warp_per_pair = per_pair
            report.flow_warp_error = float(np.mean(per_pair))
            oracle_images = [kf.image for kf in oracle_frames]
            report.extras["flow_warp_floor"] = metrics.flow_warp_error(
                oracle_images, flows, occs)
        report.pixel_count = int(sum(kf.valid_mask.sum() for kf in oracle_frames))
    else:
        report.pixel_count = int(sum(f.shape[0] * f.shape[1] for f in frames))

    initial_count = len(state.entries) - state.extended_frames
    init_psnrs = _initial_view_psnrs(state, render_cfg, initial_count)
    report.extras["initial_psnr_mean"] = float(np.mean(init_psnrs))
    for i, v in enumerate(init_psnrs):
        report.extras[f"initial_psnr_{i:03d}"] = v

    report.save(run_dir / "report.json")
    print(report.format_table())
    manifest = RunManifest(command="eval", seed=cfg.seed, threads=threads,
                           config=cfg.to_kv(), blocks=len(state.blocks),
                           frames=len(frames),
                           timings={"total_s": time.perf_counter() - t0})
    manifest.artifacts = _collect_artifacts(run_dir)
    manifest.write(run_dir)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trifield",
        description="progressive tri-plane radiance field engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=False, needs_trajectory=False):
        if needs_config:
            p.add_argument("--config", required=True, help="run config (key=value)")
        p.add_argument("--run-dir", required=True, help="run directory")
        if needs_trajectory:
            p.add_argument("--trajectory", required=True,
                           help="trajectory file (12 numbers per line, row-major [R|t])")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="torch thread count (or ENGINE_THREADS)")

    p_init = sub.add_parser("init", help="build the supporting database and fit the first block")
    common(p_init, needs_config=True)
    p_init.set_defaults(func=cmd_init)

    p_ext = sub.add_parser("extend", help="walk a trajectory, refining and retraining per frame")
    common(p_ext, needs_trajectory=True)
    p_ext.add_argument("--refiner", default=None, choices=["identity", "oracle", "lowalpha"])
    p_ext.set_defaults(func=cmd_extend)

    p_render = sub.add_parser("render", help="render a trajectory from the current state")
    common(p_render, needs_trajectory=True)
    p_render.add_argument("--out", default=None, help="output directory")
    p_render.set_defaults(func=cmd_render)

    p_eval = sub.add_parser("eval", help="compute PSNR, depth and flow-warp metrics")
    common(p_eval)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"corrupt state: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (DivergenceError, NonFiniteGradientError, NonFiniteDensityError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())
