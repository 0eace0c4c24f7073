"""Synthetic front-end stand-in: Lambertian ray-traced box scenes observed
along a closed waypoint loop, with range noise on the sampled points and a
random-walk drift composed onto the ground-truth odometry.

Dataset layout (one directory):
    poses_gt.tsv, poses_odom.tsv, meta.json,
    frames/NNNNNN_rgb.png, frames/NNNNNN_depth.pfm, frames/NNNNNN_points.ply
    (+ .ply.cov covariance sidecars)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .geom import Camera, Pose, load_trajectory_tsv, matrix_to_quat, save_trajectory_tsv, se3_exp
from .imgio import load_pfm, load_png, save_pfm, save_png
from .voxel_pca import PointCloud, load_point_cloud_ply, save_point_cloud_ply


@dataclass
class Box:
    center: tuple
    size: tuple
    seed: int = 0
    base_color: tuple = (0.8, 0.7, 0.6)


@dataclass
class SceneSpec:
    boxes: list = field(default_factory=list)
    ground: bool = True
    ground_seed: int = 1000
    ground_color: tuple = (0.45, 0.5, 0.4)
    sky_color: tuple = (0.12, 0.16, 0.25)
    light_dir: tuple = (0.4, 0.25, -0.88)
    ambient: float = 0.35


@dataclass
class TrajectorySpec:
    waypoints: list = field(default_factory=lambda: [(-6.0, -6.0), (6.0, -6.0),
                                                     (6.0, 6.0), (-6.0, 6.0)])
    height: float = 1.4
    speed: float = 1.2  # m/s
    rate: float = 10.0  # Hz
    pitch_down: float = 0.25  # rad
    loops: float = 1.05  # fraction of full cycles; > 1 revisits the start
    lookahead: float = 1.5  # m, heading smoothing


@dataclass
class NoiseSpec:
    range_sigma: float = 0.01  # m, per sampled point
    color_sigma: float = 0.0  # colorization noise on sampled point colors
    drift_sigma_t: float = 0.0  # m per frame, translation random walk
    drift_sigma_r: float = 0.0  # rad per frame


@dataclass
class SynthConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    camera: Camera = field(default_factory=lambda: Camera(
        fx=110.0, fy=110.0, cx=64.0, cy=64.0, width=128, height=128))
    points_per_frame: int = 600
    max_depth: float = 40.0  # m, sensor range; deeper pixels are invalid
    max_point_depth: float = 15.0  # m, range cut for sampled points
    seed: int = 0

    def validate(self):
        if self.trajectory.speed <= 0 or self.trajectory.rate <= 0:
            raise ValueError("speed and rate must be positive")
        if self.noise.range_sigma < 0 or self.noise.drift_sigma_t < 0 \
                or self.noise.drift_sigma_r < 0:
            raise ValueError("noise sigmas must be nonnegative")
        for b in self.scene.boxes:
            if np.any(np.asarray(b.size) <= 0):
                raise ValueError("box sizes must be positive")


def default_scene() -> SceneSpec:
    return SceneSpec(boxes=[
        Box(center=(0.0, 0.0, 1.2), size=(3.2, 3.2, 2.4), seed=11,
            base_color=(0.85, 0.55, 0.45)),
        Box(center=(-8.5, 0.0, 1.0), size=(1.6, 5.0, 2.0), seed=12,
            base_color=(0.5, 0.65, 0.85)),
        Box(center=(8.5, 0.0, 1.0), size=(1.6, 5.0, 2.0), seed=13,
            base_color=(0.55, 0.85, 0.55)),
        Box(center=(0.0, 8.5, 1.0), size=(5.0, 1.6, 2.0), seed=14,
            base_color=(0.85, 0.8, 0.5)),
        Box(center=(0.0, -8.5, 1.0), size=(5.0, 1.6, 2.0), seed=15,
            base_color=(0.75, 0.6, 0.85)),
    ])


def procedural_color(points: np.ndarray, seed: int, base_color) -> np.ndarray:
    """Smooth band-limited texture: per-channel sine mixtures, deterministic."""
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(0.8, 3.5, (3, 2, 3))
    phases = rng.uniform(0, 2 * np.pi, (3, 2))
    base = np.asarray(base_color)
    out = np.empty((len(points), 3))
    for ch in range(3):
        pat = 0.5
        for k in range(2):
            pat = pat + 0.25 * np.sin(points @ freqs[ch, k] + phases[ch, k])
        out[:, ch] = base[ch] * (0.35 + 0.65 * pat)
    return np.clip(out, 0.0, 1.0)


def _intersect_boxes(origin, dirs, boxes, eps=1e-9):
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_normal = np.zeros((n, 3))
    best_obj = np.full(n, -1, dtype=np.int64)
    safe = np.where(np.abs(dirs) < eps, eps, dirs)
    for bi, box in enumerate(boxes):
        b0 = np.asarray(box.center) - np.asarray(box.size) / 2
        b1 = np.asarray(box.center) + np.asarray(box.size) / 2
        t0 = (b0 - origin) / safe
        t1 = (b1 - origin) / safe
        tn = np.minimum(t0, t1)
        tf = np.maximum(t0, t1)
        tmin = tn.max(axis=1)
        tmax = tf.min(axis=1)
        hit = (tmax >= tmin) & (tmin > 1e-6) & (tmin < best_t)
        if not hit.any():
            continue
        axis = np.argmax(tn, axis=1)
        sign = -np.sign(dirs[np.arange(n), axis])
        normal = np.zeros((n, 3))
        normal[np.arange(n), axis] = sign
        best_normal[hit] = normal[hit]
        best_t[hit] = tmin[hit]
        best_obj[hit] = bi
    return best_t, best_normal, best_obj


def trace_rays(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit over boxes + ground plane z=0.

    Returns (t, color, hit_mask); t is in units of the (unnormalized) ray
    direction parameter.
    """
    n = len(dirs)
    t, normal, obj = _intersect_boxes(origin, dirs, scene.boxes)
    if scene.ground:
        dz = dirs[:, 2]
        tg = np.where(dz < -1e-9, -origin[2] / np.where(np.abs(dz) < 1e-9, -1e-9, dz),
                      np.inf)
        better = (tg > 1e-6) & (tg < t)
        t = np.where(better, tg, t)
        normal[better] = [0.0, 0.0, 1.0]
        obj[better] = -2  # ground
    hit = np.isfinite(t)
    color = np.tile(np.asarray(scene.sky_color), (n, 1))
    if hit.any():
        pts = origin + t[hit, None] * dirs[hit]
        albedo = np.empty((int(hit.sum()), 3))
        oh = obj[hit]
        for bi, box in enumerate(scene.boxes):
            sel = oh == bi
            if sel.any():
                albedo[sel] = procedural_color(pts[sel], box.seed, box.base_color)
        sel = oh == -2
        if sel.any():
            ground = procedural_color(pts[sel], scene.ground_seed, scene.ground_color)
            checker = (np.floor(pts[sel, 0]) + np.floor(pts[sel, 1])) % 2
            albedo[sel] = np.clip(ground * (0.85 + 0.3 * checker[:, None]), 0, 1)
        light = -np.asarray(scene.light_dir)
        light = light / np.linalg.norm(light)
        lam = np.maximum(normal[hit] @ light, 0.0)
        shade = scene.ambient + (1 - scene.ambient) * lam
        color[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)
    return t, color, hit


def render_frame(scene: SceneSpec, cam: Camera, pose: Pose):
    """Ray-traced RGB + depth (camera-frame z; 0 where no hit)."""
    us, vs = np.meshgrid(np.arange(cam.width, dtype=np.float64),
                         np.arange(cam.height, dtype=np.float64))
    dirs_cam = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy,
                         np.ones_like(us)], axis=-1).reshape(-1, 3)
    dirs_world = dirs_cam @ pose.rotation_matrix().T
    t, color, hit = trace_rays(scene, pose.t, dirs_world)
    depth = np.where(hit, t, 0.0).reshape(cam.height, cam.width)
    rgb = color.reshape(cam.height, cam.width, 3)
    return rgb, depth


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------

def _polyline(points):
    pts = np.asarray(points, dtype=np.float64)
    closed = np.vstack([pts, pts[:1]])
    seg = np.diff(closed, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    return closed, seg, lengths, cum


def _point_at(closed, seg, lengths, cum, s):
    s = s % cum[-1]
    k = int(np.searchsorted(cum, s, side="right") - 1)
    k = min(k, len(lengths) - 1)
    f = (s - cum[k]) / lengths[k]
    return closed[k] + f * seg[k]


def camera_pose_at(spec: TrajectorySpec, closed, seg, lengths, cum, s: float) -> Pose:
    p2 = _point_at(closed, seg, lengths, cum, s)
    ahead = _point_at(closed, seg, lengths, cum, s + spec.lookahead)
    heading = ahead - p2
    norm = np.linalg.norm(heading)
    heading = heading / norm if norm > 1e-12 else np.array([1.0, 0, 0])
    h = np.array([heading[0], heading[1], 0.0])
    h = h / max(np.linalg.norm(h), 1e-12)
    pitch = spec.pitch_down
    forward = np.cos(pitch) * h + np.sin(pitch) * np.array([0.0, 0.0, -1.0])
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.column_stack([right, down, forward])
    return Pose(matrix_to_quat(R), np.array([p2[0], p2[1], spec.height]))


def ground_truth_trajectory(spec: TrajectorySpec) -> list:
    closed, seg, lengths, cum = _polyline(spec.waypoints)
    total = cum[-1] * spec.loops
    n_frames = int(np.floor(total / spec.speed * spec.rate)) + 1
    ds = spec.speed / spec.rate
    return [camera_pose_at(spec, closed, seg, lengths, cum, k * ds)
            for k in range(n_frames)]


def inject_drift(gt_poses: list, sigma_t: float, sigma_r: float,
                 rng: np.random.Generator) -> list:
    """Random-walk perturbation composed onto the ground-truth relative motion."""
    if sigma_t == 0 and sigma_r == 0:
        return [p.copy() for p in gt_poses]
    odom = [gt_poses[0].copy()]
    for k in range(1, len(gt_poses)):
        rel = gt_poses[k - 1].inverse().compose(gt_poses[k])
        xi = np.concatenate([rng.normal(scale=sigma_r, size=3),
                             rng.normal(scale=sigma_t, size=3)])
        odom.append(odom[-1].compose(rel.compose(se3_exp(xi))))
    return odom


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------

def generate_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Writes the full dataset; deterministic for a fixed config."""
    cfg.validate()
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    cam = cfg.camera

    gt = ground_truth_trajectory(cfg.trajectory)
    odom = inject_drift(gt, cfg.noise.drift_sigma_t, cfg.noise.drift_sigma_r, rng)
    timestamps = [k / cfg.trajectory.rate for k in range(len(gt))]
    save_trajectory_tsv(out / "poses_gt.tsv", timestamps, gt)
    save_trajectory_tsv(out / "poses_odom.tsv", timestamps, odom)

    for k, (gt_pose, odom_pose) in enumerate(zip(gt, odom)):
        rgb, depth = render_frame(cfg.scene, cam, gt_pose)
        depth = np.where(depth <= cfg.max_depth, depth, 0.0)
        save_png(out / "frames" / f"{k:06d}_rgb.png", rgb)
        save_pfm(out / "frames" / f"{k:06d}_depth.pfm", depth)

        flat = depth.reshape(-1)
        valid = np.flatnonzero((flat > 0) & (flat <= cfg.max_point_depth))
        n_pts = min(cfg.points_per_frame, len(valid))
        chosen = rng.choice(valid, size=n_pts, replace=False) if n_pts else valid
        vv, uu = np.divmod(chosen, cam.width)
        d = depth[vv, uu] + rng.normal(scale=cfg.noise.range_sigma, size=n_pts)
        d = np.maximum(d, 1e-3)
        pts_cam = np.stack([(uu - cam.cx) / cam.fx * d, (vv - cam.cy) / cam.fy * d, d],
                           axis=-1)
        colors = rgb[vv, uu]
        if cfg.noise.color_sigma > 0:
            colors = np.clip(colors + rng.normal(scale=cfg.noise.color_sigma,
                                                 size=colors.shape), 0.0, 1.0)
        # world points are placed with the odometry pose: the map inherits drift
        cloud = PointCloud.isotropic(odom_pose.apply(pts_cam), colors,
                                     sigma=cfg.noise.range_sigma)
        save_point_cloud_ply(out / "frames" / f"{k:06d}_points.ply", cloud)

    meta = {
        "n_frames": len(gt),
        "rate": cfg.trajectory.rate,
        "stream_duration": len(gt) / cfg.trajectory.rate,
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                   "width": cam.width, "height": cam.height},
        "seed": cfg.seed,
        "points_per_frame": cfg.points_per_frame,
        "noise": asdict(cfg.noise),
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return out


class Dataset:
    """Lazy reader for the on-disk layout written by generate_dataset."""

    def __init__(self, root):
        self.root = Path(root)
        with open(self.root / "meta.json") as f:
            self.meta = json.load(f)
        c = self.meta["camera"]
        self.camera = Camera(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                             width=c["width"], height=c["height"])
        self.timestamps, self.poses_gt = load_trajectory_tsv(self.root / "poses_gt.tsv")
        _, self.poses_odom = load_trajectory_tsv(self.root / "poses_odom.tsv")

    def __len__(self) -> int:
        return self.meta["n_frames"]

    def rgb(self, k: int) -> np.ndarray:
        return load_png(self.root / "frames" / f"{k:06d}_rgb.png")

    def depth(self, k: int) -> np.ndarray:
        return load_pfm(self.root / "frames" / f"{k:06d}_depth.pfm")

    def points(self, k: int) -> PointCloud:
        return load_point_cloud_ply(self.root / "frames" / f"{k:06d}_points.ply")
