"""CPU reference splatting renderer: per-pixel exhaustive forward compositing
and exact analytic gradients for every Gaussian parameter.

Pixel centers sit at integer coordinates. Contributors are depth-sorted and
composited front to back; the backward pass replays the stored contributor
pairs, so a forward output is required to run it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Camera, Pose, quat_to_matrix
from .primitives import GaussianCloud, sh_basis, sh_basis_jacobian


class SingularCov2d(ValueError):
    """Projected covariance not invertible after dilation."""


@dataclass
class RenderConfig:
    cov2d_dilation: float = 0.3  # px^2 anti-aliasing floor added to cov2d
    alpha_clamp: float = 0.999
    t_termination: float = 1e-4
    z_near: float = 0.05  # m
    bbox_sigma: float = 3.0  # footprint half-width in sqrt(lambda_max) units
    sh_order: int = 1


@dataclass
class Projection:
    """Screen-space data for the valid (non-culled) subset of a cloud."""

    idx: np.ndarray  # (V,) indices into the cloud, depth-ascending
    mean2d: np.ndarray  # (V, 2)
    cov2d: np.ndarray  # (V, 2, 2) dilated
    conic: np.ndarray  # (V, 2, 2) inverse of cov2d
    depth: np.ndarray  # (V,)
    radius: np.ndarray  # (V,) footprint half-width, px
    mu_cam: np.ndarray  # (V, 3)


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) m (compositing-weighted, unnormalized)
    acc_alpha: np.ndarray  # (H, W) in [0, 1]
    # contributor pairs, sorted by pixel then depth (processed prefix only)
    pair_pixel: np.ndarray = field(default=None, repr=False)  # (P,) flat index
    pair_gauss: np.ndarray = field(default=None, repr=False)  # (P,) cloud index
    pair_alpha: np.ndarray = field(default=None, repr=False)  # (P,)
    pair_T: np.ndarray = field(default=None, repr=False)  # (P,) transmittance before
    proj: Projection = field(default=None, repr=False)
    colors: np.ndarray = field(default=None, repr=False)  # (N, 3) per-Gaussian RGB
    _pair_vi: np.ndarray = field(default=None, repr=False)  # (P,) index into proj

    def contributors_at(self, u: int, v: int):
        """(gauss indices, alphas, transmittances) for one pixel, front to back."""
        flat = v * self.color.shape[1] + u
        sel = self.pair_pixel == flat
        return self.pair_gauss[sel], self.pair_alpha[sel], self.pair_T[sel]


@dataclass
class GradBundle:
    """Gradients of the loss w.r.t. every Gaussian parameter.

    d_rotation is the ambient 4-vector gradient projected onto the tangent
    of the unit-quaternion sphere (orthogonal to q), so a plain additive
    update plus renormalization is first-order exact.
    """

    d_mean: np.ndarray  # (N, 3)
    d_log_scale: np.ndarray  # (N, 3)
    d_rotation: np.ndarray  # (N, 4)
    d_opacity_logit: np.ndarray  # (N,)
    d_sh: np.ndarray  # (N, B, 3)

    @classmethod
    def zeros(cls, n: int, n_bands: int) -> "GradBundle":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                   np.zeros(n), np.zeros((n, n_bands, 3)))

    def add_(self, other: "GradBundle") -> None:
        self.d_mean += other.d_mean
        self.d_log_scale += other.d_log_scale
        self.d_rotation += other.d_rotation
        self.d_opacity_logit += other.d_opacity_logit
        self.d_sh += other.d_sh

    def scale_(self, s: float) -> None:
        self.d_mean *= s
        self.d_log_scale *= s
        self.d_rotation *= s
        self.d_opacity_logit *= s
        self.d_sh *= s


def _perspective_jacobian(cam: Camera, mu_cam: np.ndarray) -> np.ndarray:
    """d(pixel)/d(mu_cam) at each camera-frame mean, (V, 2, 3)."""
    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    J = np.zeros((len(mu_cam), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z**2
    return J


def project_gaussians(cloud: GaussianCloud, cam: Camera, view: Pose,
                      cfg: RenderConfig) -> Projection:
    """EWA projection of all Gaussians; culls behind z_near or off-image.

    Returned entries are sorted by camera depth ascending (ties by index).
    """
    W_rot = view.rotation_matrix().T
    mu_cam = (cloud.means - view.t) @ W_rot.T
    depth = mu_cam[:, 2]
    front = depth > cfg.z_near

    idx = np.flatnonzero(front)
    mu_cam = mu_cam[idx]
    depth = depth[idx]
    J = _perspective_jacobian(cam, mu_cam)
    M = J @ W_rot  # (V, 2, 3)
    sigma = cloud.covariances()[idx]
    cov2d = np.einsum("nij,njk,nlk->nil", M, sigma, M)
    cov2d[:, 0, 0] += cfg.cov2d_dilation
    cov2d[:, 1, 1] += cfg.cov2d_dilation

    mean2d = np.stack([cam.fx * mu_cam[:, 0] / depth + cam.cx,
                       cam.fy * mu_cam[:, 1] / depth + cam.cy], axis=-1)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b**2, 0.0))
    lam_max = mid + disc
    radius = cfg.bbox_sigma * np.sqrt(np.maximum(lam_max, 0.0))

    on_image = ((mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= cam.width - 1)
                & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= cam.height - 1))

    det = a * c - b * b
    if np.any(det[on_image] <= 0):
        raise SingularCov2d("non-positive determinant after dilation")

    keep = np.flatnonzero(on_image)
    order = keep[np.lexsort((idx[keep], depth[keep]))]
    conic = np.empty((len(order), 2, 2))
    d = det[order]
    conic[:, 0, 0] = cov2d[order, 1, 1] / d
    conic[:, 1, 1] = cov2d[order, 0, 0] / d
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[order, 0, 1] / d
    return Projection(idx=idx[order], mean2d=mean2d[order], cov2d=cov2d[order],
                      conic=conic, depth=depth[order], radius=radius[order],
                      mu_cam=mu_cam[order])


def project_gaussian(gaussian, cam: Camera, view: Pose, cfg: RenderConfig = None):
    """Single-Gaussian projection; returns (mean2d, cov2d, depth) or None (culled)."""
    cfg = cfg or RenderConfig()
    cloud = GaussianCloud([gaussian.mean], [gaussian.log_scale], [gaussian.rotation],
                          [gaussian.opacity_logit], [gaussian.sh])
    proj = project_gaussians(cloud, cam, view, cfg)
    if len(proj.idx) == 0:
        return None
    return proj.mean2d[0], proj.cov2d[0], float(proj.depth[0])


def _build_pairs(proj: Projection, cam: Camera):
    """Ragged bbox rasterization -> flat (pixel, projected-gaussian) pairs."""
    x0 = np.maximum(0, np.ceil(proj.mean2d[:, 0] - proj.radius)).astype(np.int64)
    x1 = np.minimum(cam.width - 1, np.floor(proj.mean2d[:, 0] + proj.radius)).astype(np.int64)
    y0 = np.maximum(0, np.ceil(proj.mean2d[:, 1] - proj.radius)).astype(np.int64)
    y1 = np.minimum(cam.height - 1, np.floor(proj.mean2d[:, 1] + proj.radius)).astype(np.int64)
    wpx = np.maximum(0, x1 - x0 + 1)
    hpx = np.maximum(0, y1 - y0 + 1)
    area = wpx * hpx
    total = int(area.sum())
    if total == 0:
        return (np.zeros(0, np.int64),) * 3
    vi = np.repeat(np.arange(len(area)), area)
    start = np.concatenate([[0], np.cumsum(area)[:-1]])
    within = np.arange(total) - np.repeat(start, area)
    w_rep = np.repeat(np.maximum(wpx, 1), area)
    px = np.repeat(x0, area) + within % w_rep
    py = np.repeat(y0, area) + within // w_rep
    return vi, px, py


def render(cloud: GaussianCloud, cam: Camera, view: Pose,
           cfg: RenderConfig = None) -> RenderOutput:
    """Forward pass: color, compositing-weighted depth, accumulated opacity."""
    cfg = cfg or RenderConfig()
    H, W = cam.height, cam.width
    out = RenderOutput(color=np.zeros((H, W, 3)), depth=np.zeros((H, W)),
                       acc_alpha=np.zeros((H, W)))
    out.pair_pixel = np.zeros(0, np.int64)
    out.pair_gauss = np.zeros(0, np.int64)
    out.pair_alpha = np.zeros(0)
    out.pair_T = np.zeros(0)
    if len(cloud) == 0:
        out.colors = np.zeros((0, 3))
        return out

    proj = project_gaussians(cloud, cam, view, cfg)
    out.proj = proj
    colors = cloud.colors_from(view.t, order=cfg.sh_order)
    out.colors = colors
    if len(proj.idx) == 0:
        return out

    vi, px, py = _build_pairs(proj, cam)
    if len(vi) == 0:
        return out
    pix = py * W + px
    order = np.argsort(pix, kind="stable")  # preserves depth order per pixel
    vi, px, py, pix = vi[order], px[order], py[order], pix[order]

    d = np.stack([px, py], axis=-1).astype(np.float64) - proj.mean2d[vi]
    conic = proj.conic[vi]
    q = (conic[:, 0, 0] * d[:, 0] ** 2 + 2 * conic[:, 0, 1] * d[:, 0] * d[:, 1]
         + conic[:, 1, 1] * d[:, 1] ** 2)
    opac = cloud.opacities()[proj.idx[vi]]
    alpha = np.minimum(opac * np.exp(-0.5 * q), cfg.alpha_clamp)

    new_seg = np.concatenate([[True], pix[1:] != pix[:-1]])
    starts = np.flatnonzero(new_seg)
    seg_id = np.cumsum(new_seg) - 1
    lt = np.log1p(-alpha)
    c = np.cumsum(lt)
    c_excl = np.concatenate([[0.0], c[:-1]])
    logT = c_excl - c_excl[starts][seg_id]
    T = np.exp(logT)
    processed = T >= cfg.t_termination  # prefix per segment (T nonincreasing)

    counts = np.add.reduceat(processed.astype(np.int64), starts)
    last = starts + counts - 1
    t_final_seg = np.exp(logT[last] + lt[last])
    t_final = np.ones(H * W)
    t_final[pix[starts]] = t_final_seg
    out.acc_alpha = (1.0 - t_final).reshape(H, W)

    sel = processed
    pix_p, vi_p, alpha_p, T_p = pix[sel], vi[sel], alpha[sel], T[sel]
    w = T_p * alpha_p
    gid = proj.idx[vi_p]
    col = colors[gid]
    img = np.stack([np.bincount(pix_p, weights=w * col[:, ch], minlength=H * W)
                    for ch in range(3)], axis=-1)
    out.color = img.reshape(H, W, 3)
    out.depth = np.bincount(pix_p, weights=w * proj.depth[vi_p],
                            minlength=H * W).reshape(H, W)
    out.pair_pixel = pix_p
    out.pair_gauss = gid
    out.pair_alpha = alpha_p
    out.pair_T = T_p
    out._pair_vi = vi_p
    return out


def _quat_rotation_grad(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """<dL/dR, dR/dq_i> for unit quaternions (N, 4), dR (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = np.empty((len(q), 4))
    g[:, 0] = 2 * (-z * (dR[:, 0, 1] - dR[:, 1, 0]) + y * (dR[:, 0, 2] - dR[:, 2, 0])
                   - x * (dR[:, 1, 2] - dR[:, 2, 1]))
    g[:, 1] = 2 * (y * (dR[:, 0, 1] + dR[:, 1, 0]) + z * (dR[:, 0, 2] + dR[:, 2, 0])
                   - 2 * x * (dR[:, 1, 1] + dR[:, 2, 2])
                   - w * (dR[:, 1, 2] - dR[:, 2, 1]))
    g[:, 2] = 2 * (x * (dR[:, 0, 1] + dR[:, 1, 0]) + z * (dR[:, 1, 2] + dR[:, 2, 1])
                   - 2 * y * (dR[:, 0, 0] + dR[:, 2, 2])
                   + w * (dR[:, 0, 2] - dR[:, 2, 0]))
    g[:, 3] = 2 * (x * (dR[:, 0, 2] + dR[:, 2, 0]) + y * (dR[:, 1, 2] + dR[:, 2, 1])
                   - 2 * z * (dR[:, 0, 0] + dR[:, 1, 1])
                   - w * (dR[:, 0, 1] - dR[:, 1, 0]))
    return g


def render_backward(cloud: GaussianCloud, cam: Camera, view: Pose, out: RenderOutput,
                    d_color: np.ndarray, d_depth: np.ndarray,
                    cfg: RenderConfig = None) -> GradBundle:
    """Exact gradients of a loss with image-space gradients (d_color, d_depth).

    Uses the contributor pairs stored by render(). Frozen Gaussians and
    non-contributors get zeros.
    """
    cfg = cfg or RenderConfig()
    H, W = cam.height, cam.width
    grads = GradBundle.zeros(len(cloud), cloud.n_bands)
    if out.pair_pixel is None or len(out.pair_pixel) == 0:
        return grads
    proj = out.proj
    nv = len(proj.idx)

    pix = out.pair_pixel
    vi = out._pair_vi
    alpha = out.pair_alpha
    T = out.pair_T
    gid = proj.idx[vi]
    px = pix % W
    py = pix // W
    w = T * alpha
    z = proj.depth[vi]
    col = out.colors[gid]

    dCp = d_color.reshape(-1, 3)[pix]  # (P, 3)
    dDp = d_depth.reshape(-1)[pix]

    # color and depth direct terms
    d_colors_v = np.stack([np.bincount(vi, weights=w * dCp[:, ch], minlength=nv)
                           for ch in range(3)], axis=-1)
    d_z = np.bincount(vi, weights=w * dDp, minlength=nv)

    # alpha gradient with downstream-transmittance suffix terms
    new_seg = np.concatenate([[True], pix[1:] != pix[:-1]])
    starts = np.flatnonzero(new_seg)
    seg_id = np.cumsum(new_seg) - 1

    def suffix(values):  # (P,) -> sum over later pairs in the same pixel
        cum = np.cumsum(values)
        seg_tot = np.add.reduceat(values, starts)
        cum_excl_start = (cum - values)[starts]
        incl = cum - cum_excl_start[seg_id]
        return seg_tot[seg_id] - incl

    g_alpha = dDp * (T * z - suffix(w * z) / (1.0 - alpha))
    for ch in range(3):
        g_alpha = g_alpha + dCp[:, ch] * (T * col[:, ch] - suffix(w * col[:, ch]) / (1.0 - alpha))

    live = alpha < cfg.alpha_clamp  # clamped pairs have zero local derivative
    g_alpha = np.where(live, g_alpha, 0.0)

    opac = cloud.opacities()[gid]
    G = np.where(live, alpha / opac, 0.0)
    d_opacity = np.bincount(vi, weights=g_alpha * G * opac * (1 - opac), minlength=nv)

    # quadratic form q = d^T conic d;  alpha = o * exp(-q/2)
    d_off = np.stack([px, py], axis=-1).astype(np.float64) - proj.mean2d[vi]
    gq = g_alpha * alpha * (-0.5)
    conic = proj.conic[vi]
    cd = np.einsum("nij,nj->ni", conic, d_off)
    d_mean2d_v = np.stack([np.bincount(vi, weights=-2.0 * gq * cd[:, k], minlength=nv)
                           for k in range(2)], axis=-1)
    # dL/dconic = gq * d d^T ; dL/dcov2d = -conic dL/dconic conic
    dconic = np.empty((nv, 2, 2))
    for i in range(2):
        for j in range(2):
            dconic[:, i, j] = np.bincount(vi, weights=gq * d_off[:, i] * d_off[:, j],
                                          minlength=nv)
    dcov2d = -np.einsum("nij,njk,nkl->nil", proj.conic, dconic, proj.conic)

    # ---- per-Gaussian chains (over the projected subset) ----
    W_rot = view.rotation_matrix().T
    mu_cam = proj.mu_cam
    x, y, zc = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    J = _perspective_jacobian(cam, mu_cam)
    M = J @ W_rot
    sigma = cloud.covariances()[proj.idx]

    d_sigma = np.einsum("nji,njk,nkl->nil", M, dcov2d, M)
    dM = 2.0 * np.einsum("nij,njk,nkl->nil", dcov2d, M, sigma)
    dJ = np.einsum("nij,nkj->nik", dM, np.broadcast_to(W_rot, (nv, 3, 3)))

    d_mu_cam = np.einsum("nji,nj->ni", J, d_mean2d_v)  # projection term
    d_mu_cam[:, 0] += dJ[:, 0, 2] * (-cam.fx / zc**2)
    d_mu_cam[:, 1] += dJ[:, 1, 2] * (-cam.fy / zc**2)
    d_mu_cam[:, 2] += (dJ[:, 0, 0] * (-cam.fx / zc**2) + dJ[:, 0, 2] * (2 * cam.fx * x / zc**3)
                       + dJ[:, 1, 1] * (-cam.fy / zc**2) + dJ[:, 1, 2] * (2 * cam.fy * y / zc**3))
    d_mu_cam[:, 2] += d_z
    d_mean_v = d_mu_cam @ W_rot

    # SH color: c = clip(0.5 + basis . sh)
    order = cfg.sh_order
    delta = cloud.means[proj.idx] - view.t
    dist = np.linalg.norm(delta, axis=1, keepdims=True)
    dirs = delta / np.maximum(dist, 1e-12)
    basis = sh_basis(dirs, order)
    nb = basis.shape[1]
    raw = 0.5 + np.einsum("nb,nbc->nc", basis, cloud.sh[proj.idx, :nb, :])
    open_interval = (raw > 0.0) & (raw < 1.0)
    draw = d_colors_v * open_interval

    d_sh_v = np.einsum("nb,nc->nbc", basis, draw)
    jac = sh_basis_jacobian(dirs, order)  # (V, nb, 3)
    ddir = np.einsum("nbc,nc,nbd->nd", cloud.sh[proj.idx, :nb, :], draw, jac)
    # dir = delta/|delta| ; d dir/d delta = (I - dir dir^T)/|delta|
    d_mean_v += (ddir - dirs * np.sum(ddir * dirs, axis=1, keepdims=True)) / np.maximum(dist, 1e-12)

    # covariance chain: sigma = R diag(e^{2s}) R^T
    Rg = quat_to_matrix(cloud.rotations[proj.idx])
    D = np.exp(2.0 * cloud.log_scales[proj.idx])
    RtSR = np.einsum("nji,njk,nkl->nil", Rg, d_sigma, Rg)
    d_log_scale_v = 2.0 * D * np.einsum("nii->ni", RtSR)
    dR = 2.0 * np.einsum("nij,njk->nik", d_sigma, Rg) * D[:, None, :]
    q_arr = cloud.rotations[proj.idx]
    d_q = _quat_rotation_grad(q_arr, dR)
    d_q -= q_arr * np.sum(d_q * q_arr, axis=1, keepdims=True)  # tangent projection

    # scatter the projected subset back into full-cloud gradients
    grads.d_mean[proj.idx] = d_mean_v
    grads.d_log_scale[proj.idx] = d_log_scale_v
    grads.d_rotation[proj.idx] = d_q
    grads.d_opacity_logit[proj.idx] = d_opacity
    grads.d_sh[proj.idx, :nb, :] = d_sh_v

    frozen = cloud.frozen
    if frozen.any():
        grads.d_mean[frozen] = 0
        grads.d_log_scale[frozen] = 0
        grads.d_rotation[frozen] = 0
        grads.d_opacity_logit[frozen] = 0
        grads.d_sh[frozen] = 0
    return grads
