"""Single JSON configuration document with one section per subsystem.

Every default named across the package lives here; CLI flags override
entries through dotted paths (e.g. ``map.r_dup=0.1``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .gauss_init import InitConfig
from .geom import Camera
from .loop_graph import LoopConfig
from .losses import LossWeights
from .map_opt import MapConfig
from .render import RenderConfig
from .synth import Box, NoiseSpec, SceneSpec, SynthConfig, TrajectorySpec, default_scene


@dataclass
class VoxelConfig:
    voxel_size: float = 0.5  # m
    tau_p: float = 0.0025  # m^2, planar eigenvalue threshold
    tau_l: float = 25.0  # linear eigenvalue ratio threshold
    tau_trace: float = 1e-3  # descriptor-covariance reliability threshold
    n_min: int = 10
    eps_lambda: float = 1e-8
    require_mid_above_tau_p: bool = False
    window_frames: int = 0  # > 0: fit only the most recent frames per voxel


@dataclass
class FfmConfig:
    provider: str = "stub"  # stub | off | dir:<path>
    contrast_threshold: float = 0.02


@dataclass
class PipelineConfig:
    steps_per_frame: int = 10
    total_step_budget: int = -1  # -1 = unlimited
    holdout_every: int = 8  # frame k is a test view iff k % N == N - 1
    queue_depth: int = 4
    loop_enabled: bool = True
    seed: int = 0
    streaming_pace: str = "fast"  # fast | realtime


@dataclass
class Config:
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    init: InitConfig = field(default_factory=InitConfig)
    ffm: FfmConfig = field(default_factory=FfmConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    map: MapConfig = field(default_factory=MapConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(scene=default_scene()))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_to_dict(cfg: Config) -> dict:
    return _jsonable(dataclasses.asdict(cfg))


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def _synth_from_dict(d: dict) -> SynthConfig:
    scene_d = dict(d.get("scene", {}))
    boxes = [_build(Box, dict(b)) for b in scene_d.pop("boxes", [])]
    scene = _build(SceneSpec, scene_d)
    scene.boxes = boxes
    return SynthConfig(
        scene=scene,
        trajectory=_build(TrajectorySpec, dict(d.get("trajectory", {}))),
        noise=_build(NoiseSpec, dict(d.get("noise", {}))),
        camera=_build(Camera, dict(d.get("camera", {}))) if "camera" in d
        else SynthConfig().camera,
        points_per_frame=d.get("points_per_frame", SynthConfig().points_per_frame),
        seed=d.get("seed", 0),
    )


def config_from_dict(data: dict) -> Config:
    sections = {
        "voxel": VoxelConfig, "init": InitConfig, "ffm": FfmConfig,
        "render": RenderConfig, "loss": LossWeights, "map": MapConfig,
        "loop": LoopConfig, "pipeline": PipelineConfig,
    }
    kwargs = {}
    for name, cls in sections.items():
        if name in data:
            kwargs[name] = _build(cls, dict(data[name]))
    if "synth" in data:
        kwargs["synth"] = _synth_from_dict(data["synth"])
    unknown = set(data) - set(sections) - {"synth"}
    if unknown:
        raise KeyError(f"unknown config sections: {sorted(unknown)}")
    return Config(**kwargs)


def load_config(path) -> Config:
    with open(path) as f:
        return config_from_dict(json.load(f))


def save_config(path, cfg: Config) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=1, sort_keys=True)


def apply_overrides(cfg: Config, overrides: list) -> Config:
    """Dotted-path assignments like map.r_dup=0.1; values parsed as JSON,
    falling back to bare strings."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like section.key=value: {item!r}")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        keys = path.split(".")
        for k in keys[:-1]:
            node = node[k]
        if keys[-1] not in node:
            raise KeyError(f"unknown config path: {path}")
        node[keys[-1]] = value
    return config_from_dict(data)


def make_voxel_map(cfg: VoxelConfig):
    from .voxel_pca import VoxelMap

    return VoxelMap(voxel_size=cfg.voxel_size, tau_p=cfg.tau_p, tau_l=cfg.tau_l,
                    tau_trace=cfg.tau_trace, n_min=cfg.n_min,
                    eps_lambda=cfg.eps_lambda,
                    require_mid_above_tau_p=cfg.require_mid_above_tau_p,
                    window_frames=cfg.window_frames)
