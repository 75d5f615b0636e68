"""Command-line entry point.

Subcommands:
  simulate  write a synthetic dataset directory (rgb/depth/flow/mask + GT)
  run       track + map over a dataset directory, write trajectory/map/report
  eval      compare two TUM trajectories (ATE)
  render    render a saved map from trajectory poses

Exit codes: 0 success, 1 input/usage error, 2 tracking lost.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import DEFAULTS, load_config, save_config

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_TRACKING_LOST = 2


def _split_overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.lstrip("-")] = value
    return out


def _build_parser():
    p = argparse.ArgumentParser(prog="dynsplat", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", type=str, default=None, help="JSON config file")
        sp.add_argument("overrides", nargs="*", metavar="key=value",
                        help="config overrides")

    sp = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    sp.add_argument("--out", required=True)
    add_common(sp)

    sp = sub.add_parser("run", help="run tracking+mapping over a dataset directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    add_common(sp)

    sp = sub.add_parser("eval", help="ATE between two TUM trajectories")
    sp.add_argument("--est", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--align", default="similarity",
                    choices=["none", "rigid", "similarity"])

    sp = sub.add_parser("render", help="render a saved map from trajectory poses")
    sp.add_argument("--map", dest="map_path", required=True)
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--out", required=True)
    add_common(sp)
    return p


def _cmd_simulate(args, cfg) -> int:
    from .simulate import MotionSpec, NoiseSpec, ObjectSpec, SimConfig, simulate
    from .pipeline import export_bundle
    sim_cfg = SimConfig(
        seed=cfg["seed"], width=cfg["width"], height=cfg["height"],
        fx=cfg["fx"], fy=cfg["fy"], cx=cfg["cx"], cy=cfg["cy"],
        n_background=cfg["n_background"], n_frames=cfg["n_frames"],
        objects=(ObjectSpec(n_gaussians=cfg["object_gaussians"],
                            extent=cfg["object_extent"]),),
        noise=NoiseSpec(flow_sigma=cfg["flow_sigma"],
                        depth_noise_rel=cfg["depth_noise_rel"],
                        depth_scale_range=(cfg["depth_scale_lo"], cfg["depth_scale_hi"]),
                        mask_flip_fp=cfg["mask_flip_fp"],
                        mask_flip_fn=cfg["mask_flip_fn"]))
    bundle = simulate(sim_cfg)
    out = Path(args.out)
    export_bundle(bundle, out)
    save_config(out / "config.json", cfg)
    print(f"wrote {sim_cfg.n_frames} frames to {out}")
    return EXIT_OK


def _cmd_run(args, cfg) -> int:
    from .pipeline import Pipeline, load_dataset, save_result
    from .tracking import TrackingLost
    seq = load_dataset(args.data)
    pipe = Pipeline(cfg)
    try:
        result = pipe.run(seq)
    except TrackingLost as exc:
        print(f"tracking lost: {exc}", file=sys.stderr)
        return EXIT_TRACKING_LOST
    save_result(result, args.out, seq)
    print(result.report.to_json())
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .evaluate import InsufficientOverlap, ate_rmse
    from .trajectory import read_tum
    est = read_tum(args.est)
    gt = read_tum(args.gt)
    try:
        value = ate_rmse(est, gt, args.align)
    except InsufficientOverlap as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps({"ate_rmse": value, "alignment": args.align,
                      "n_est": len(est), "n_gt": len(gt)}, indent=2))
    return EXIT_OK


def _cmd_render(args, cfg) -> int:
    from .geometry import CameraIntrinsics
    from .io_files import load_map, write_color_png, write_depth_png
    from .splat import RenderConfig, render
    from .trajectory import read_tum
    gmap = load_map(args.map_path)
    traj = read_tum(args.trajectory)
    k = CameraIntrinsics(cfg["fx"], cfg["fy"], cfg["cx"], cfg["cy"],
                         cfg["width"], cfg["height"])
    rcfg = RenderConfig(cfg["near_plane"], cfg["cov_inflation"],
                        cfg["support_sigma"], cfg["term_transmittance"],
                        cfg["opacity_clamp"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (ts, c2w) in enumerate(traj.entries):
        img = render(gmap, c2w.inverse(), k, rcfg)
        write_color_png(out / f"{i:06d}.png", img.color)
        write_depth_png(out / f"{i:06d}_depth.png", img.depth)
    print(f"rendered {len(traj)} views to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "eval":
            return _cmd_eval(args)
        cfg = load_config(args.config, _split_overrides(args.overrides))
        if args.command == "simulate":
            return _cmd_simulate(args, cfg)
        if args.command == "run":
            return _cmd_run(args, cfg)
        if args.command == "render":
            return _cmd_render(args, cfg)
        parser.error(f"unknown command {args.command}")
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
