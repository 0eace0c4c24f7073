import json
from pathlib import Path

import numpy as np
import pytest

from splatmap.cli import main as cli_main
from splatmap.config import Config, apply_overrides, config_from_dict, config_to_dict, save_config
from splatmap.geom import Camera
from splatmap.map_opt import load_map_ply
from splatmap.pipeline import psnr, run
from splatmap.synth import Box, NoiseSpec, SceneSpec, SynthConfig, TrajectorySpec, generate_dataset


def small_run_config() -> Config:
    cfg = Config()
    cfg.synth = SynthConfig(
        scene=SceneSpec(boxes=[
            Box(center=(0.0, 0.0, 1.2), size=(3.0, 3.0, 2.4), seed=7,
                base_color=(0.85, 0.55, 0.45)),
            Box(center=(-6.5, 0.0, 1.0), size=(1.2, 4.0, 2.0), seed=8,
                base_color=(0.5, 0.65, 0.85)),
        ]),
        trajectory=TrajectorySpec(waypoints=[(-4, -4), (4, -4), (4, 4), (-4, 4)],
                                  speed=2.0, rate=5.0, loops=1.1, height=1.4),
        noise=NoiseSpec(range_sigma=0.01, drift_sigma_t=0.0, drift_sigma_r=0.0),
        camera=Camera(fx=42.0, fy=42.0, cx=24.0, cy=24.0, width=48, height=48),
        points_per_frame=150,
        seed=1,
    )
    cfg.pipeline.steps_per_frame = 2
    cfg.pipeline.seed = 3
    cfg.init.keyframe_gap = 5
    cfg.map.recent_window = 6
    cfg.map.scene_extent = 8.0
    cfg.loop.r_search = 3.0
    cfg.loop.min_gap = 10
    cfg.loop.n_min = 40
    cfg.loop.eps_res = 1.0
    cfg.loop.d_max = 20.0
    return cfg


@pytest.fixture(scope="module")
def clean_dataset(tmp_path_factory):
    cfg = small_run_config()
    root = tmp_path_factory.mktemp("clean_ds")
    generate_dataset(cfg.synth, root)
    return root, cfg


@pytest.fixture(scope="module")
def drift_dataset(tmp_path_factory):
    cfg = small_run_config()
    cfg.synth.noise.drift_sigma_t = 0.02
    cfg.synth.noise.drift_sigma_r = 0.002
    cfg.synth.seed = 2
    cfg.synth.points_per_frame = 250
    cfg.ffm.provider = "off"  # registration leans on voxel-PCA normals
    root = tmp_path_factory.mktemp("drift_ds")
    generate_dataset(cfg.synth, root)
    return root, cfg


def test_deterministic_run_basics(clean_dataset, tmp_path):
    root, cfg = clean_dataset
    report = run(root, cfg, mode="deterministic", loop_enabled=False,
                 out_dir=tmp_path / "run")
    assert report["map"]["n_gaussians"] > 200
    assert report["map"]["n_segments"] >= 5
    assert report["optimization"]["total_steps"] > 50
    assert report["ate_rmse"] < 0.05  # no drift injected
    assert report["eval"]["psnr_mean"] > 10
    assert report["real_time_factor"] is None
    assert (tmp_path / "run" / "report.json").exists()
    assert (tmp_path / "run" / "map.ply").exists()
    assert (tmp_path / "run" / "trajectory.tsv").exists()
    assert (tmp_path / "run" / "timings.json").exists()
    cloud, sidecar = load_map_ply(tmp_path / "run" / "map.ply")
    assert len(cloud) == report["map"]["n_gaussians"]
    assert len(sidecar["segments"]) == report["map"]["n_segments"]


def test_deterministic_reports_byte_identical(clean_dataset, tmp_path):
    root, cfg = clean_dataset
    run(root, cfg, mode="deterministic", loop_enabled=False, out_dir=tmp_path / "a")
    run(root, cfg, mode="deterministic", loop_enabled=False, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "report.json").read_bytes()
    b = (tmp_path / "b" / "report.json").read_bytes()
    assert a == b


def test_holdout_discipline(clean_dataset, tmp_path):
    root, cfg = clean_dataset
    report = run(root, cfg, mode="deterministic", loop_enabled=False,
                 out_dir=tmp_path / "run")
    test_frames = set(report["holdout"]["test_frames"])
    supervised = set(report["holdout"]["supervised_frames"])
    assert test_frames, "holdout set should not be empty"
    assert not (test_frames & supervised)
    assert {r["frame"] for r in report["eval"]["per_view"]} == test_frames


def test_streaming_run_completes(clean_dataset, tmp_path):
    root, cfg = clean_dataset
    report = run(root, cfg, mode="streaming", loop_enabled=False,
                 out_dir=tmp_path / "run")
    assert report["real_time_factor"] is not None
    assert report["real_time_factor"] > 0
    assert report["map"]["n_gaussians"] > 200
    assert report["optimization"]["total_steps"] > 0


def test_loop_closure_reduces_ate(drift_dataset, tmp_path):
    root, cfg = drift_dataset
    rep_off = run(root, cfg, mode="deterministic", loop_enabled=False,
                  out_dir=tmp_path / "off")
    rep_on = run(root, cfg, mode="deterministic", loop_enabled=True,
                 out_dir=tmp_path / "on")
    assert rep_off["ate_rmse"] > 0.01  # drift hurts
    assert rep_on["loop"]["accepted"], "expected at least one accepted loop"
    assert rep_on["ate_rmse"] < rep_off["ate_rmse"]
    # corrected end should agree better with ground truth start revisit
    assert np.isclose(rep_on["ate_rmse_odom"], rep_off["ate_rmse_odom"])


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = small_run_config()
    path = tmp_path / "c.json"
    save_config(path, cfg)
    with open(path) as f:
        data = json.load(f)
    cfg2 = config_from_dict(data)
    assert config_to_dict(cfg2) == config_to_dict(cfg)
    cfg3 = apply_overrides(cfg, ["map.r_dup=0.25", "pipeline.seed=9",
                                 "ffm.provider=off"])
    assert cfg3.map.r_dup == 0.25
    assert cfg3.pipeline.seed == 9
    assert cfg3.ffm.provider == "off"
    with pytest.raises(KeyError):
        apply_overrides(cfg, ["map.unknown_key=1"])


def test_psnr_closed_form():
    img = np.full((8, 8, 3), 0.5)
    assert psnr(img, img) == 99.0
    assert np.isclose(psnr(img, img + 0.1), 20.0)


def test_cli_end_to_end(tmp_path, capsys):
    cfg = small_run_config()
    cfg.synth.trajectory.loops = 0.4  # shorter: CLI smoke only
    cfg_path = tmp_path / "cfg.json"
    save_config(cfg_path, cfg)
    ds = tmp_path / "ds"
    assert cli_main(["synth", "--config", str(cfg_path), "--out", str(ds)]) == 0
    out = tmp_path / "run"
    assert cli_main(["run", "--dataset", str(ds), "--mode", "deterministic",
                     "--loop", "off", "--out", str(out), "--config", str(cfg_path),
                     "--set", "pipeline.steps_per_frame=1"]) == 0
    assert (out / "map.ply").exists()
    assert cli_main(["eval", "--map", str(out / "map.ply"), "--dataset", str(ds),
                     "--out", str(tmp_path / "eval.json")]) == 0
    assert (tmp_path / "eval.json").exists()
    assert cli_main(["render", "--map", str(out / "map.ply"),
                     "--pose", "0 0 1.4 0.5 -0.5 0.5 -0.5",
                     "--out", str(tmp_path / "view")]) == 0
    assert (tmp_path / "view_rgb.png").exists()
    assert (tmp_path / "view_depth.pfm").exists()
    assert (tmp_path / "view_alpha.pfm").exists()
    assert cli_main(["gicp", "--src", str(out / "map.ply"),
                     "--tar", str(out / "map.ply"), "--n-min", "10"]) == 0
    txt = capsys.readouterr().out
    assert "converged: True" in txt
    # failure path: nonzero exit with module-named diagnostic
    assert cli_main(["eval", "--map", str(tmp_path / "missing.ply"),
                     "--dataset", str(ds)]) == 1
