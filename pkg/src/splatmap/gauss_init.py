"""Keyframe/loopframe selection, segment bookkeeping, and cascaded Gaussian
initialization: model prediction where valid, voxel-PCA prior where reliable,
isotropic depth/focal heuristic otherwise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Camera, Pose, pose_geodesic_angle, project_points, quat_multiply, quat_normalize
from .ffm import AttributeMaps
from .primitives import Gaussian, GaussianCloud, Source, color_to_dc, num_sh_bands
from .voxel_pca import PointCloud


class EmptySegment(ValueError):
    """Loopframe closed with no accumulated keyframe observations."""


VIEW_PREV = 0
VIEW_CUR = 1


@dataclass
class Frame:
    """Synchronized front-end output for one keyframe."""

    index: int
    pose: Pose  # world-from-camera
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) m, 0 = invalid
    points: PointCloud  # world frame
    prior_rotations: np.ndarray = None  # (N, 4)
    prior_log_scales: np.ndarray = None  # (N, 3)
    prior_reliable: np.ndarray = None  # (N,) bool

    def attach_priors(self, priors: list) -> None:
        self.prior_rotations = np.array([p.rotation for p in priors])
        self.prior_log_scales = np.array([p.log_scale for p in priors])
        self.prior_reliable = np.array([p.reliable for p in priors], dtype=bool)


@dataclass
class Segment:
    """Gaussians initialized between two consecutive loopframes."""

    id: int
    loopframe_index: int
    gaussians: GaussianCloud
    anchor_pose: Pose
    correction: Pose = field(default_factory=Pose.identity)
    keyframe_indices: list = field(default_factory=list)
    source_counts: tuple = (0, 0, 0)  # (model, pca, heuristic)


def select_keyframe(index: int, gap: int) -> bool:
    if gap < 1:
        raise ValueError("gap must be >= 1")
    return index % gap == 0


def select_loopframe(pose: Pose, last_loopframe_pose: Pose, tau_t: float, tau_r: float) -> bool:
    """Trigger when translation or geodesic rotation to the last loopframe
    exceeds its threshold."""
    if np.linalg.norm(pose.t - last_loopframe_pose.t) > tau_t:
        return True
    return pose_geodesic_angle(pose, last_loopframe_pose) > tau_r


def pick_view(p_world: np.ndarray, prev_lf: Frame, cur_lf: Frame, cam: Camera):
    """Choose the closer loopframe view that sees the point.

    Returns (view, pixel, depth) with view in {VIEW_PREV, VIEW_CUR} or
    (None, None, None) when neither projects in-image with positive depth.
    Equal depths prefer the current view.
    """
    choice, pixel, depth = pick_views_batch(np.asarray(p_world).reshape(1, 3),
                                            prev_lf, cur_lf, cam)
    if choice[0] < 0:
        return None, None, None
    return int(choice[0]), pixel[0], float(depth[0])


def pick_views_batch(p_world: np.ndarray, prev_lf: Frame, cur_lf: Frame, cam: Camera):
    """Vectorized pick_view: (choice (N,) int, -1 = none; pixels; depths)."""
    pix_p, z_p, ok_p = project_points(cam, prev_lf.pose.inverse().apply(p_world))
    pix_c, z_c, ok_c = project_points(cam, cur_lf.pose.inverse().apply(p_world))
    choice = np.full(len(p_world), -1, dtype=np.int64)
    choice[ok_p] = VIEW_PREV
    take_cur = ok_c & (~ok_p | (z_c <= z_p))
    choice[take_cur] = VIEW_CUR
    pixels = np.where((choice == VIEW_CUR)[:, None], pix_c, pix_p)
    depths = np.where(choice == VIEW_CUR, z_c, z_p)
    return choice, pixels, depths


def resolve_pixel_conflicts(choice: np.ndarray, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Keep the closest point per integer pixel cell of each chosen view.

    Losers fall through to the non-model branches. Ties keep the lowest
    point index. Points with no view (choice < 0) are not survivors.
    """
    n = len(choice)
    survivor = np.zeros(n, dtype=bool)
    best: dict[tuple, int] = {}
    cells_u = np.floor(pixels[:, 0] + 0.5).astype(np.int64)
    cells_v = np.floor(pixels[:, 1] + 0.5).astype(np.int64)
    for i in range(n):
        if choice[i] < 0:
            continue
        key = (int(choice[i]), cells_u[i], cells_v[i])
        j = best.get(key)
        if j is None or depths[i] < depths[j]:
            best[key] = i
    for i in best.values():
        survivor[i] = True
    return survivor


@dataclass
class ModelAttrs:
    """Cascade model-branch output, already in the world frame."""

    rotation: np.ndarray  # (4,)
    log_scale: np.ndarray  # (3,)
    opacity_logit: float
    sh_rest: np.ndarray  # (bands - 1, 3)


def sample_model_attrs(maps: AttributeMaps, pixel: np.ndarray, cam_pose: Pose,
                       d: float, f: float):
    """Bilinear sample of the attribute maps at a subpixel location.

    Interpolates over the valid subset of the 4 neighbors with renormalized
    weights (None when all are invalid). Quaternions are hemisphere-aligned
    to the dominant neighbor before averaging, then renormalized and taken
    camera -> world. The shape ratio is normalized to unit geometric mean so
    exp(log_scale) has geometric mean d / f.
    """
    h, w = maps.shape
    u, v = float(pixel[0]), float(pixel[1])
    x0, y0 = int(np.floor(u)), int(np.floor(v))
    fu, fv = u - x0, v - y0
    neighbors = []
    for (dx, dy, wgt) in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)),
                          (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        x, y = x0 + dx, y0 + dy
        if 0 <= x < w and 0 <= y < h and maps.valid[y, x]:
            neighbors.append((y, x, wgt))
    total = sum(wgt for _, _, wgt in neighbors)
    if not neighbors or total <= 0:
        return None

    ys = [n[0] for n in neighbors]
    xs = [n[1] for n in neighbors]
    wgts = np.array([n[2] for n in neighbors]) / total

    quats = maps.rotation[ys, xs].astype(np.float64)
    ref = quats[int(np.argmax(wgts))]
    flip = np.sign(quats @ ref)
    flip[flip == 0] = 1.0
    q_cam = quat_normalize((quats * (flip * wgts)[:, None]).sum(axis=0))

    a = (maps.scale_shape[ys, xs].astype(np.float64) * wgts[:, None]).sum(axis=0)
    a_norm = a / np.exp(np.mean(np.log(a)))
    log_scale = np.log(d / f * a_norm)

    opacity = float((maps.opacity_logit[ys, xs].astype(np.float64) * wgts).sum())
    sh = (maps.sh[ys, xs].astype(np.float64) * wgts[:, None, None]).sum(axis=0)
    return ModelAttrs(rotation=quat_multiply(cam_pose.q, q_cam),
                      log_scale=log_scale, opacity_logit=opacity, sh_rest=sh[1:])


def compute_beta(n_pca_only: int, n_total: int, beta_min: float) -> float:
    """Bounded scale damping: share of reliable-but-model-invalid points."""
    if not 0 <= n_pca_only <= n_total or n_total < 1:
        raise ValueError("need 0 <= n_pca_only <= n_total, n_total >= 1")
    return float(np.clip(n_pca_only / n_total, beta_min, 1.0))


def cascade_init(position, color, prior_rotation, prior_log_scale, prior_reliable,
                 model_attrs, beta: float, d: float, f: float,
                 opacity0: float, n_bands: int, segment_id: int = -1) -> Gaussian:
    """One Gaussian from one point via the three-branch cascade."""
    sh = np.zeros((n_bands, 3))
    sh[0] = color_to_dc(color)
    if model_attrs is not None:
        rest = model_attrs.sh_rest[: n_bands - 1]
        sh[1: 1 + len(rest)] = rest
        return Gaussian(mean=np.asarray(position, float), log_scale=model_attrs.log_scale,
                        rotation=model_attrs.rotation, opacity_logit=model_attrs.opacity_logit,
                        sh=sh, segment_id=segment_id, source=Source.MODEL)
    o_logit = float(np.log(opacity0 / (1.0 - opacity0)))
    if prior_reliable:
        return Gaussian(mean=np.asarray(position, float),
                        log_scale=np.asarray(prior_log_scale, float) + np.log(beta),
                        rotation=np.asarray(prior_rotation, float), opacity_logit=o_logit,
                        sh=sh, segment_id=segment_id, source=Source.PCA)
    return Gaussian(mean=np.asarray(position, float),
                    log_scale=np.full(3, np.log(d / f)),
                    rotation=np.array([1.0, 0, 0, 0]), opacity_logit=o_logit,
                    sh=sh, segment_id=segment_id, source=Source.HEURISTIC)


@dataclass
class InitConfig:
    keyframe_gap: int = 5
    loop_trans_thresh: float = 2.0  # m
    loop_rot_thresh: float = float(np.deg2rad(15.0))  # rad
    focal_mode: str = "fx"  # or "mean"
    opacity0: float = 0.1
    beta_min: float = 0.2
    sh_order: int = 1
    force_heuristic: bool = False  # ablation: disable model + pca branches

    def focal(self, cam: Camera) -> float:
        return cam.fx if self.focal_mode == "fx" else 0.5 * (cam.fx + cam.fy)


def close_segment(keyframes: list, prev_lf: Frame, cur_lf: Frame, cam: Camera,
                  provider, cfg: InitConfig, segment_id: int) -> Segment:
    """Aggregate the segment's keyframe points into one Gaussian per point."""
    if not keyframes:
        raise EmptySegment(f"no keyframes before loopframe {cur_lf.index}")
    positions = np.concatenate([kf.points.positions for kf in keyframes])
    colors = np.concatenate([kf.points.colors for kf in keyframes])
    prior_rot = np.concatenate([kf.prior_rotations for kf in keyframes])
    prior_scale = np.concatenate([kf.prior_log_scales for kf in keyframes])
    prior_rel = np.concatenate([kf.prior_reliable for kf in keyframes])
    n = len(positions)
    f = cfg.focal(cam)
    n_bands = num_sh_bands(cfg.sh_order)

    if cfg.force_heuristic:
        prior_rel = np.zeros(n, dtype=bool)
        model = [None] * n
        choice = np.full(n, -1)
        depths = np.zeros(n)
    else:
        maps_prev, maps_cur = provider.predict(prev_lf.rgb, cur_lf.rgb,
                                               prev_lf.index, cur_lf.index)
        choice, pixels, depths = pick_views_batch(positions, prev_lf, cur_lf, cam)
        survivor = resolve_pixel_conflicts(choice, pixels, depths)
        model = [None] * n
        for i in np.flatnonzero(survivor):
            maps = maps_cur if choice[i] == VIEW_CUR else maps_prev
            pose = cur_lf.pose if choice[i] == VIEW_CUR else prev_lf.pose
            model[i] = sample_model_attrs(maps, pixels[i], pose, depths[i], f)

    # fallback range for points outside both views
    d_all = np.where(choice >= 0, depths,
                     np.linalg.norm(positions - cur_lf.pose.t, axis=1))
    d_all = np.maximum(d_all, 1e-6)

    model_invalid = np.array([m is None for m in model])
    n_pca_only = int(np.sum(model_invalid & prior_rel))
    beta = compute_beta(n_pca_only, n, cfg.beta_min)

    gaussians = [
        cascade_init(positions[i], colors[i], prior_rot[i], prior_scale[i],
                     bool(prior_rel[i]), model[i], beta, float(d_all[i]), f,
                     cfg.opacity0, n_bands, segment_id)
        for i in range(n)
    ]
    cloud = GaussianCloud.from_list(gaussians)
    counts = tuple(int(np.sum(cloud.source == s)) for s in
                   (Source.MODEL, Source.PCA, Source.HEURISTIC))
    return Segment(id=segment_id, loopframe_index=cur_lf.index, gaussians=cloud,
                   anchor_pose=cur_lf.pose.copy(),
                   keyframe_indices=[kf.index for kf in keyframes],
                   source_counts=counts)
