"""Command-line interface.

Subcommands:
    run     track and map an RGB-D sequence, write trajectory/checkpoint/report
    synth   generate a synthetic dynamic sequence in TUM layout
    render  render color/depth/opacity (and flow) from a checkpoint
    eval    score a finished run against ground truth

Exit codes: 0 ok, 1 user error, 2 internal error. Set SPLAT4D_NUM_THREADS
to pin the kernel thread count and SPLAT4D_BACKEND to numba/numpy.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np


def _configure_threads() -> None:
    n = os.environ.get("SPLAT4D_NUM_THREADS", "").strip()
    if not n:
        return
    try:
        import numba
        numba.set_num_threads(max(1, int(n)))
    except (ImportError, ValueError):
        pass


def _load_config(path):
    from .config import Config, load_config
    return load_config(path) if path else Config()


def cmd_run(args) -> int:
    from .dataset import export_ply, load_tum_sequence, save_checkpoint, atomic_write_text
    from .metrics import format_report, print_report_table
    from .pipeline import SlamSystem, checkpoint_arrays, evaluate_run

    in_dir = Path(args.input)
    if not in_dir.is_dir():
        print(f"error: input directory not found: {in_dir}", file=sys.stderr)
        return 1
    cfg = _load_config(args.config)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)

    source = load_tum_sequence(in_dir, mask_dilation=cfg.mask_dilation_px)
    if source.intrinsics.near_clip != cfg.near_clip:
        from dataclasses import replace
        source.intrinsics = replace(source.intrinsics, near_clip=cfg.near_clip)
    system = SlamSystem(source, cfg, seed=args.seed, max_frames=args.max_frames)
    result = system.run()

    atomic_write_text(out_dir / "trajectory.txt", result.trajectory_text())
    arrays, meta = checkpoint_arrays(result)
    meta["seed"] = args.seed
    save_checkpoint(out_dir / "checkpoint.s4dc", arrays, meta)
    export_ply(out_dir / "map.ply", result.mapper.gaussians)
    metrics = evaluate_run(result, source)
    atomic_write_text(out_dir / "metrics.txt", format_report(metrics))
    atomic_write_text(out_dir / "timing.txt", f"runtime_s = {result.runtime_s:.3f}\n")
    print_report_table(metrics)
    print(f"runtime: {result.runtime_s:.1f}s; outputs in {out_dir}")
    return 0


def cmd_synth(args) -> int:
    from .dataset import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec()
    if args.spec:
        import configparser
        parser = configparser.ConfigParser()
        if not Path(args.spec).exists():
            print(f"error: spec file not found: {args.spec}", file=sys.stderr)
            return 1
        parser.read(args.spec)
        sect = parser["scene"] if parser.has_section("scene") else parser["DEFAULT"]
        fields = {
            "n_frames": int, "width": int, "height": int, "focal": float,
            "wall_z": float, "wall_gaussians": int, "object_gaussians": int,
            "object_radius": float, "camera_yaw": float, "fps": float,
        }
        kwargs = {k: conv(sect[k]) for k, conv in fields.items() if k in sect}
        for k in ("object_center", "object_velocity", "object_spin", "camera_sweep"):
            if k in sect:
                kwargs[k] = tuple(float(v) for v in sect[k].split())
        spec = SyntheticSpec(**kwargs)
    if args.frames:
        spec.n_frames = args.frames
    generate_synthetic(spec, args.output, seed=args.seed)
    print(f"wrote {spec.n_frames}-frame synthetic sequence to {args.output}")
    return 0


def cmd_render(args) -> int:
    from .config import Config
    from .dataset import load_checkpoint
    from .geometry import PoseSE3
    from .pipeline import restore_scene
    from .render import dump_channels, render_flow_map, render_set

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        print(f"error: checkpoint not found: {ckpt}", file=sys.stderr)
        return 1
    arrays, meta = load_checkpoint(ckpt)
    gs, field, cam, n_frames = restore_scene(arrays, meta)
    cfg = _load_config(args.config)

    if args.pose:
        vals = [float(v) for v in args.pose.split()]
        if len(vals) != 7:
            print("error: --pose needs 'tx ty tz qx qy qz qw' (camera-to-world)",
                  file=sys.stderr)
            return 1
        tx, ty, tz, qx, qy, qz, qw = vals
        pose = PoseSE3(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])).inverse()
    else:
        kf_ids = arrays["kf_ids"]
        row = arrays["kf_poses"][0]
        pose = PoseSE3(row[:4], row[4:])

    t = args.time
    dyn_mask = gs.dy
    means = gs.means.copy()
    rots = gs.rots.copy()
    if dyn_mask.any() and not field.identity():
        dyn = gs.subset(dyn_mask)
        if field.neighbors is None or field.neighbors.shape[0] != len(dyn):
            field.bind(dyn.means)
        d_means, d_rots, _ = field.deform(dyn, t)
        means[dyn_mask] = d_means
        rots[dyn_mask] = d_rots
    out = render_set(gs, pose, cam, cfg, means=means, rots=rots)

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_channels(out, out_dir, prefix="view")
    if dyn_mask.any() and not field.identity():
        dt = 1.0 / max(n_frames - 1, 1)
        dyn = gs.subset(dyn_mask)
        m_prev, r_prev, _ = field.deform(dyn, max(t - dt, 0.0))
        m_cur, r_cur, _ = field.deform(dyn, t)
        flow, _ = render_flow_map(m_cur, r_cur, m_prev, dyn, pose, cam, cfg, True)
        from .dataset import write_flo
        write_flo(out_dir / "view_flow.flo", flow)
    print(f"rendered {cam.width}x{cam.height} view at t={t} into {out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .dataset import parse_trajectory_file
    from .metrics import ate_rmse, format_report, parse_report, print_report_table
    from .dataset import atomic_write_text

    run_dir = Path(args.run)
    gt_dir = Path(args.gt)
    traj_path = run_dir / "trajectory.txt"
    gt_path = gt_dir / "groundtruth.txt"
    if not traj_path.exists():
        print(f"error: {traj_path} not found", file=sys.stderr)
        return 1
    if not gt_path.exists():
        print(f"error: {gt_path} not found", file=sys.stderr)
        return 1
    est = parse_trajectory_file(traj_path)
    gt = parse_trajectory_file(gt_path)
    metrics = {"ate_cm": f"{ate_rmse(est, gt):.4f}"}
    run_metrics = run_dir / "metrics.txt"
    if run_metrics.exists():
        stored = parse_report(run_metrics.read_text())
        for key in ("psnr_db", "ssim", "lpips"):
            if key in stored:
                metrics[key] = stored[key]
    atomic_write_text(run_dir / "eval.txt", format_report(metrics))
    print_report_table(metrics)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splat4d",
                                     description="dynamic RGB-D gaussian-splatting SLAM")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="track and map a sequence")
    p_run.add_argument("--input", required=True, help="TUM-layout sequence directory")
    p_run.add_argument("--config", default=None, help="config file (INI)")
    p_run.add_argument("--output", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--max-frames", type=int, default=None)
    p_run.set_defaults(fn=cmd_run)

    p_synth = sub.add_parser("synth", help="generate a synthetic sequence")
    p_synth.add_argument("--spec", default=None, help="scene script (INI, [scene] section)")
    p_synth.add_argument("--output", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--frames", type=int, default=None)
    p_synth.set_defaults(fn=cmd_synth)

    p_render = sub.add_parser("render", help="render a checkpoint")
    p_render.add_argument("--checkpoint", required=True)
    p_render.add_argument("--pose", default=None,
                          help="camera-to-world 'tx ty tz qx qy qz qw'")
    p_render.add_argument("--time", type=float, default=0.0,
                          help="normalized time in [0,1]")
    p_render.add_argument("--output", required=True)
    p_render.add_argument("--config", default=None)
    p_render.set_defaults(fn=cmd_render)

    p_eval = sub.add_parser("eval", help="evaluate a run against ground truth")
    p_eval.add_argument("--run", required=True, help="run output directory")
    p_eval.add_argument("--gt", required=True, help="directory with groundtruth.txt")
    p_eval.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    _configure_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal failure
        import traceback
        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
