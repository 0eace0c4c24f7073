"""Global Gaussian map: dedup insertion, recent/history view sampling,
K-segment freezing, sparse Adam refinement, bounded-ratio opacity pruning,
and the splat-PLY checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import Camera, Pose, quat_normalize
from .losses import EmptyMask, LossWeights, compute_losses, interior_mask, losses_backward
from .primitives import GaussianCloud
from .render import RenderConfig, render, render_backward
from .spatial import HashGrid3D


@dataclass
class MapConfig:
    r_dup: float = 0.05  # m, dedup radius
    recent_window: int = 10  # views
    rho: float = 0.7  # recent-window sampling probability
    freeze_k: int = 3  # segments kept unfrozen
    o_thresh: float = 0.05
    prune_max_ratio: float = 0.1
    prune_every: int = 50  # optimizer steps
    batch_views: int = 1
    lr_mean: float = 1.6e-4
    scene_extent: float = 1.0  # multiplies lr_mean
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    mask_alpha_thresh: float = 0.5
    mask_r_erode: int = 2


@dataclass
class View:
    """Committed supervision view; pose tracks loop corrections."""

    frame_index: int
    pose: Pose
    rgb: np.ndarray
    depth: np.ndarray
    segment_id: int
    camera: Camera = None


@dataclass
class SegmentRecord:
    id: int
    loopframe_index: int
    anchor_pose: Pose
    correction: Pose = field(default_factory=Pose.identity)
    keyframe_indices: list = field(default_factory=list)


class _AdamState:
    """Per-parameter moments with per-row step counts (sparse updates)."""

    def __init__(self, n_bands: int):
        self.m = {}
        self.v = {}
        self.steps = np.zeros(0, dtype=np.int64)
        self._shapes = {"means": (3,), "log_scales": (3,), "rotations": (4,),
                        "opacity_logits": (), "sh": None}
        self.n_bands = n_bands
        for name, tail in self._shapes.items():
            tail = (n_bands, 3) if name == "sh" else tail
            self.m[name] = np.zeros((0,) + tail)
            self.v[name] = np.zeros((0,) + tail)

    def grow(self, n_new: int) -> None:
        for name in self.m:
            tail = self.m[name].shape[1:]
            self.m[name] = np.concatenate([self.m[name], np.zeros((n_new,) + tail)])
            self.v[name] = np.concatenate([self.v[name], np.zeros((n_new,) + tail)])
        self.steps = np.concatenate([self.steps, np.zeros(n_new, dtype=np.int64)])

    def compact(self, keep: np.ndarray) -> None:
        for name in self.m:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]
        self.steps = self.steps[keep]


class GlobalMap:
    def __init__(self, cfg: MapConfig, n_bands: int):
        self.cfg = cfg
        self.cloud = GaussianCloud.empty(n_bands)
        self.records: list[SegmentRecord] = []
        self.views: list[View] = []
        self.index = HashGrid3D(cfg.r_dup)
        self.adam = _AdamState(n_bands)
        self.step_count = 0

    def __len__(self) -> int:
        return len(self.cloud)

    # --- insertion -----------------------------------------------------------

    def insert_segment(self, segment) -> int:
        """Dedup against the pre-insert map, append survivors, index them.

        A candidate is dropped iff an existing map Gaussian lies within
        r_dup of its mean.
        """
        cand = segment.gaussians
        if len(self.cloud) == 0:
            keep = np.ones(len(cand), dtype=bool)
        else:
            keep = np.array([not self.index.any_within(m, self.cfg.r_dup)
                             for m in cand.means])
        survivors = cand.subset(keep)
        self.cloud.append(survivors)
        if len(survivors):
            self.index.insert(survivors.means)
        self.adam.grow(len(survivors))
        self.records.append(SegmentRecord(
            id=segment.id, loopframe_index=segment.loopframe_index,
            anchor_pose=segment.anchor_pose.copy(), correction=segment.correction.copy(),
            keyframe_indices=list(segment.keyframe_indices)))
        return int(keep.sum())

    def commit_view(self, view: View) -> None:
        self.views.append(view)

    def rebuild_index(self) -> None:
        self.index = HashGrid3D(self.cfg.r_dup)
        if len(self.cloud):
            self.index.insert(self.cloud.means)

    # --- window sampling -------------------------------------------------------

    def sample_views(self, rng: np.random.Generator, batch: int = None) -> list:
        """Recent window with probability rho, history otherwise."""
        if not self.views:
            raise ValueError("no committed views")
        batch = batch or self.cfg.batch_views
        r = self.cfg.recent_window
        recent = self.views[-r:]
        history = self.views[:-r]
        out = []
        for _ in range(batch):
            pool = recent if (not history or rng.random() < self.cfg.rho) else history
            out.append(pool[rng.integers(len(pool))])
        return out

    # --- freezing ---------------------------------------------------------------

    def apply_freeze_policy(self, k: int = None) -> None:
        """Freeze every Gaussian outside the K most recent segments."""
        k = k or self.cfg.freeze_k
        if k < 1:
            raise ValueError("K must be >= 1")
        live_ids = {rec.id for rec in self.records[-k:]}
        self.cloud.frozen = ~np.isin(self.cloud.segment_ids, list(live_ids))

    # --- optimization --------------------------------------------------------------

    def optimize_step(self, views: list, weights: LossWeights,
                      render_cfg: RenderConfig) -> dict:
        """One sparse adaptive update over a view batch; returns loss record."""
        n = len(self.cloud)
        record = {"total": 0.0, "rgb": 0.0, "ssim": 0.0, "depth": 0.0, "views": 0,
                  "skipped_empty_mask": 0}
        if n == 0:
            return record
        grad_sum = None
        for view in views:
            out = render(self.cloud, view.camera, view.pose, render_cfg)
            mask = interior_mask(out.acc_alpha, self.cfg.mask_alpha_thresh,
                                 self.cfg.mask_r_erode)
            try:
                total, l_rgb, l_ssim, l_depth = compute_losses(
                    out.color, out.depth, view.rgb, view.depth, mask, weights)
                d_color, d_depth = losses_backward(
                    out.color, out.depth, view.rgb, view.depth, mask, weights)
            except EmptyMask:
                record["skipped_empty_mask"] += 1
                continue
            grads = render_backward(self.cloud, view.camera, view.pose, out,
                                    d_color, d_depth, render_cfg)
            if grad_sum is None:
                grad_sum = grads
            else:
                grad_sum.add_(grads)
            record["total"] += total
            record["rgb"] += l_rgb
            record["ssim"] += l_ssim
            record["depth"] += l_depth
            record["views"] += 1
        if record["views"] == 0:
            return record
        for key in ("total", "rgb", "ssim", "depth"):
            record[key] /= record["views"]
        grad_sum.scale_(1.0 / record["views"])
        self._adam_update(grad_sum)
        self.step_count += 1
        return record

    def _adam_update(self, grads) -> None:
        cfg = self.cfg
        per_field = {
            "means": (grads.d_mean, cfg.lr_mean * cfg.scene_extent),
            "log_scales": (grads.d_log_scale, cfg.lr_log_scale),
            "rotations": (grads.d_rotation, cfg.lr_rotation),
            "opacity_logits": (grads.d_opacity_logit, cfg.lr_opacity),
            "sh": (grads.d_sh, cfg.lr_sh),
        }
        touched = ~self.cloud.frozen
        any_grad = np.zeros(len(self.cloud), dtype=bool)
        for g, _ in per_field.values():
            any_grad |= np.any(g.reshape(len(g), -1) != 0, axis=1)
        upd = np.flatnonzero(touched & any_grad)
        if len(upd) == 0:
            return
        self.adam.steps[upd] += 1
        t = self.adam.steps[upd]
        for name, (g, lr) in per_field.items():
            m, v = self.adam.m[name], self.adam.v[name]
            gu = g[upd]
            m[upd] = cfg.beta1 * m[upd] + (1 - cfg.beta1) * gu
            v[upd] = cfg.beta2 * v[upd] + (1 - cfg.beta2) * gu**2
            bc1 = 1 - cfg.beta1**t
            bc2 = 1 - cfg.beta2**t
            shape = (len(upd),) + (1,) * (g.ndim - 1)
            mhat = m[upd] / bc1.reshape(shape)
            vhat = v[upd] / bc2.reshape(shape)
            getattr(self.cloud, name)[upd] -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        self.cloud.rotations[upd] = quat_normalize(self.cloud.rotations[upd])

    # --- pruning --------------------------------------------------------------------

    def prune(self, o_thresh: float = None, max_ratio: float = None) -> int:
        """Remove the lowest-opacity unfrozen Gaussians below threshold,
        bounded by floor(max_ratio * unfrozen count)."""
        o_thresh = self.cfg.o_thresh if o_thresh is None else o_thresh
        max_ratio = self.cfg.prune_max_ratio if max_ratio is None else max_ratio
        if not 0 <= max_ratio <= 1:
            raise ValueError("max_ratio in [0, 1]")
        unfrozen = ~self.cloud.frozen
        n_unfrozen = int(unfrozen.sum())
        budget = int(np.floor(max_ratio * n_unfrozen))
        opac = self.cloud.opacities()
        cand = np.flatnonzero(unfrozen & (opac < o_thresh))
        if budget == 0 or len(cand) == 0:
            return 0
        order = np.lexsort((cand, opac[cand]))  # (opacity, index) ascending
        remove = cand[order[:budget]]
        keep = np.ones(len(self.cloud), dtype=bool)
        keep[remove] = False
        self.cloud = self.cloud.subset(keep)
        self.adam.compact(keep)
        self.rebuild_index()
        return len(remove)


# ---------------------------------------------------------------------------
# checkpoint: binary splat PLY + JSON sidecar
# ---------------------------------------------------------------------------

def _pose_to_list(p: Pose) -> list:
    return [float(x) for x in np.concatenate([p.t, p.q])]


def _pose_from_list(vals) -> Pose:
    return Pose(np.array(vals[3:7]), np.array(vals[0:3]))


def save_map_ply(path, cloud: GaussianCloud, records: list = None,
                 config: dict = None, camera: Camera = None) -> None:
    """De-facto splat layout: x y z, f_dc_*, f_rest_* (channel-major),
    opacity, scale_*, rot_* (w x y z); little-endian float32."""
    path = Path(path)
    n = len(cloud)
    bands = cloud.n_bands
    n_rest = 3 * (bands - 1)
    names = (["x", "y", "z"] + [f"f_dc_{i}" for i in range(3)]
             + [f"f_rest_{i}" for i in range(n_rest)] + ["opacity"]
             + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    rest = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, n_rest)  # channel-major
    data = np.concatenate([
        cloud.means, cloud.sh[:, 0, :], rest,
        cloud.opacity_logits[:, None], cloud.log_scales, cloud.rotations,
    ], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        f.write(data.tobytes())

    sidecar = {"sh_bands": bands, "count": n}
    if records is not None:
        seg_list = []
        for rec in records:
            rows = np.flatnonzero(cloud.segment_ids == rec.id)
            start = int(rows[0]) if len(rows) else -1
            seg_list.append({
                "id": rec.id, "loopframe_index": rec.loopframe_index,
                "start": start, "count": int(len(rows)),
                "anchor_pose": _pose_to_list(rec.anchor_pose),
                "correction": _pose_to_list(rec.correction),
                "keyframe_indices": list(map(int, rec.keyframe_indices)),
            })
        sidecar["segments"] = seg_list
    if config is not None:
        sidecar["config"] = config
    if camera is not None:
        sidecar["camera"] = {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx,
                             "cy": camera.cy, "width": camera.width,
                             "height": camera.height}
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)


def load_map_ply(path):
    """Returns (cloud, sidecar dict); segment ids restored from the sidecar."""
    path = Path(path)
    with open(path, "rb") as f:
        names = []
        n = 0
        while True:
            line = f.readline().decode().strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property float"):
                names.append(line.split()[-1])
            elif line == "end_header":
                break
        data = np.frombuffer(f.read(n * len(names) * 4), dtype="<f4").reshape(n, len(names))
    col = {name: i for i, name in enumerate(names)}
    n_rest = sum(1 for name in names if name.startswith("f_rest_"))
    bands = n_rest // 3 + 1
    sh = np.zeros((n, bands, 3))
    for ch in range(3):
        sh[:, 0, ch] = data[:, col[f"f_dc_{ch}"]]
        for b in range(bands - 1):
            sh[:, b + 1, ch] = data[:, col[f"f_rest_{ch * (bands - 1) + b}"]]
    cloud = GaussianCloud(
        data[:, [col["x"], col["y"], col["z"]]],
        data[:, [col["scale_0"], col["scale_1"], col["scale_2"]]],
        data[:, [col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]]],
        data[:, col["opacity"]], sh)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    sidecar = {}
    if sidecar_path.exists():
        with open(sidecar_path) as f:
            sidecar = json.load(f)
        for seg in sidecar.get("segments", []):
            if seg["start"] >= 0:
                cloud.segment_ids[seg["start"]: seg["start"] + seg["count"]] = seg["id"]
    return cloud, sidecar


def records_from_sidecar(sidecar: dict) -> list:
    records = []
    for seg in sidecar.get("segments", []):
        records.append(SegmentRecord(
            id=seg["id"], loopframe_index=seg["loopframe_index"],
            anchor_pose=_pose_from_list(seg["anchor_pose"]),
            correction=_pose_from_list(seg["correction"]),
            keyframe_indices=seg["keyframe_indices"]))
    return records
