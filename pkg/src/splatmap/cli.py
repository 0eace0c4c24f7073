"""Command line: synth / run / eval / gicp / render subcommands."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import Config, apply_overrides, load_config
from .geom import Camera, Pose, load_trajectory_tsv
from .imgio import save_pfm, save_png
from .loop_graph import LoopConfig, gaussian_gicp
from .map_opt import load_map_ply
from .pipeline import evaluate_views, run
from .render import RenderConfig, render
from .synth import Dataset, generate_dataset


def _parse_pose(text: str) -> Pose:
    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) != 7:
        raise ValueError("pose needs 7 values: tx ty tz qw qx qy qz")
    return Pose(np.array(vals[3:7]), np.array(vals[0:3]))


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    if getattr(args, "ffm", None):
        cfg.ffm.provider = args.ffm
    return cfg


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out = generate_dataset(cfg.synth, args.out)
    print(f"dataset written to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    report = run(args.dataset, cfg, mode=args.mode,
                 loop_enabled=args.loop == "on", out_dir=args.out)
    print(json.dumps({k: report[k] for k in
                      ("mode", "ate_rmse", "ate_rmse_odom")}, indent=1))
    if report["real_time_factor"] is not None:
        print(f"real-time factor: {report['real_time_factor']:.2f} "
              f"(optimizer-only {report['real_time_factor_optimizer']:.2f})")
    ev = report["eval"]
    if ev["psnr_mean"] is not None:
        print(f"held-out PSNR {ev['psnr_mean']:.2f} dB, SSIM {ev['ssim_mean']:.3f}")
    print(f"outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    cloud, sidecar = load_map_ply(args.map)
    cam_d = sidecar.get("camera")
    if cam_d is None:
        raise ValueError("map sidecar lacks camera intrinsics")
    cam = Camera(**cam_d)
    dataset = Dataset(args.dataset)
    holdout = sidecar.get("config", {}).get("pipeline", {}).get("holdout_every", 8)
    traj_path = Path(args.trajectory) if args.trajectory else \
        Path(args.map).parent / "trajectory.tsv"
    if traj_path.exists():
        _, poses = load_trajectory_tsv(traj_path)
    else:
        poses = dataset.poses_odom
    render_cfg = RenderConfig()
    sh_order = sidecar.get("config", {}).get("render", {}).get("sh_order")
    if sh_order is not None:
        render_cfg.sh_order = sh_order
    test_frames = [k for k in range(len(dataset))
                   if holdout > 0 and k % holdout == holdout - 1]
    views = [(k, poses[k], dataset.rgb(k)) for k in test_frames]
    result = evaluate_views(cloud, cam, views, render_cfg)
    for row in result["per_view"]:
        print(f"frame {row['frame']:6d}  PSNR {row['psnr']:6.2f} dB  "
              f"SSIM {row['ssim']:.4f}")
    print(f"mean PSNR {result['psnr_mean']:.2f} dB, mean SSIM {result['ssim_mean']:.4f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(result, f, indent=1, sort_keys=True)
    return 0


def cmd_gicp(args) -> int:
    src, _ = load_map_ply(args.src)
    tar, _ = load_map_ply(args.tar)
    cfg = LoopConfig(d_corr=args.d_corr, n_min=args.n_min, eps_res=args.eps_res)
    init = _parse_pose(args.init) if args.init else Pose.identity()
    result = gaussian_gicp(src, tar, init, cfg)
    t = result.transform
    print(f"converged: {result.converged}  iterations: {result.iterations}")
    print(f"correspondences: {result.n_correspondences}  "
          f"mean Mahalanobis residual: {result.residual:.6f}")
    print("transform (tx ty tz qw qx qy qz): "
          + " ".join(f"{v:.9g}" for v in np.concatenate([t.t, t.q])))
    return 0


def cmd_render(args) -> int:
    cloud, sidecar = load_map_ply(args.map)
    cam_d = sidecar.get("camera")
    if cam_d is None:
        raise ValueError("map sidecar lacks camera intrinsics")
    cam = Camera(**cam_d)
    pose = _parse_pose(args.pose)
    render_cfg = RenderConfig()
    sh_order = sidecar.get("config", {}).get("render", {}).get("sh_order")
    if sh_order is not None:
        render_cfg.sh_order = sh_order
    out = render(cloud, cam, pose, render_cfg)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_png(f"{prefix}_rgb.png", out.color)
    save_pfm(f"{prefix}_depth.pfm", out.depth)
    save_pfm(f"{prefix}_alpha.pfm", out.acc_alpha)
    print(f"wrote {prefix}_rgb.png, {prefix}_depth.pfm, {prefix}_alpha.pfm")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatmap",
                                description="Gaussian-splatting mapping backend")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--set", action="append", help="override, e.g. synth.seed=3")
    sp.set_defaults(func=cmd_synth)

    rp = sub.add_parser("run", help="run the mapping backend over a dataset")
    rp.add_argument("--dataset", required=True)
    rp.add_argument("--mode", choices=("streaming", "deterministic"),
                    default="deterministic")
    rp.add_argument("--loop", choices=("on", "off"), default="on")
    rp.add_argument("--out", required=True)
    rp.add_argument("--config")
    rp.add_argument("--ffm", help="attribute-map provider: stub | off | dir:<path>")
    rp.add_argument("--set", action="append", help="override, e.g. map.r_dup=0.1")
    rp.set_defaults(func=cmd_run)

    ep = sub.add_parser("eval", help="PSNR/SSIM of a map on held-out views")
    ep.add_argument("--map", required=True)
    ep.add_argument("--dataset", required=True)
    ep.add_argument("--trajectory", help="pose TSV (default: trajectory.tsv next to map)")
    ep.add_argument("--out", help="write the table as JSON")
    ep.set_defaults(func=cmd_eval)

    gp = sub.add_parser("gicp", help="standalone Gaussian GICP registration")
    gp.add_argument("--src", required=True)
    gp.add_argument("--tar", required=True)
    gp.add_argument("--init", help="initial guess pose: tx ty tz qw qx qy qz")
    gp.add_argument("--d-corr", type=float, default=1.0)
    gp.add_argument("--n-min", type=int, default=50)
    gp.add_argument("--eps-res", type=float, default=0.5)
    gp.set_defaults(func=cmd_gicp)

    vp = sub.add_parser("render", help="render a map checkpoint from a pose")
    vp.add_argument("--map", required=True)
    vp.add_argument("--pose", required=True, help="tx ty tz qw qx qy qz")
    vp.add_argument("--out", default="render", help="output prefix")
    vp.set_defaults(func=cmd_render)
    return p


_MODULE_NAMES = {
    "splatmap.geom": "geom", "splatmap.voxel_pca": "voxel_pca",
    "splatmap.gauss_init": "gauss_init", "splatmap.ffm": "gauss_init",
    "splatmap.render": "splat_render", "splatmap.losses": "splat_render",
    "splatmap.map_opt": "map_opt", "splatmap.loop_graph": "loop_graph",
    "splatmap.pipeline": "pipeline", "splatmap.synth": "pipeline",
    "splatmap.config": "pipeline",
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        module = _MODULE_NAMES.get(type(exc).__module__, "pipeline")
        print(f"error [{module}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
