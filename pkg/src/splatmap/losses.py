"""Supervision losses over the eroded interior mask: per-pixel L1 color,
masked SSIM (window statistics renormalized over valid pixels), and L1 depth.
Both values and analytic image-space gradients are provided."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyMask(ValueError):
    """No supervised pixels."""


@dataclass
class LossWeights:
    l_rgb: float = 0.8
    l_ssim: float = 0.2
    l_depth: float = 0.1

    def __post_init__(self):
        if self.l_rgb < 0 or self.l_ssim < 0 or self.l_depth < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.l_rgb == self.l_ssim == self.l_depth == 0:
            raise ValueError("at least one loss weight must be positive")


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


def _binary_min_filter_1d(mask: np.ndarray, r: int, axis: int) -> np.ndarray:
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(mask, pad, constant_values=False)
    n = mask.shape[axis]
    slabs = [np.take(padded, np.arange(k, k + n), axis=axis) for k in range(2 * r + 1)]
    return np.logical_and.reduce(slabs)


def erode_mask(mask: np.ndarray, r: int) -> np.ndarray:
    """Binary erosion with a Chebyshev (square) disc of radius r.

    Separable min filter; pixels beyond the border count as unsupported.
    """
    if r < 0:
        raise ValueError("radius must be >= 0")
    if r == 0:
        return mask.copy()
    return _binary_min_filter_1d(_binary_min_filter_1d(mask, r, 0), r, 1)


def interior_mask(acc_alpha: np.ndarray, alpha_thresh: float = 0.5, r_erode: int = 2) -> np.ndarray:
    """Erosion of the opacity-support mask: supervise only reliable interiors."""
    return erode_mask(acc_alpha > alpha_thresh, r_erode)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def _window_offsets(window: np.ndarray):
    r = window.shape[0] // 2
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            yield dv, du, window[dv + r, du + r]


def _shifted_views(img: np.ndarray, dv: int, du: int):
    """Index ranges so dst[sl_c] += src[sl_n] reads pixel (p + offset)."""
    h, w = img.shape[:2]
    cv0, cv1 = max(0, -dv), min(h, h - dv)
    cu0, cu1 = max(0, -du), min(w, w - du)
    nv0, nv1 = cv0 + dv, cv1 + dv
    nu0, nu1 = cu0 + du, cu1 + du
    return (slice(cv0, cv1), slice(cu0, cu1)), (slice(nv0, nv1), slice(nu0, nu1))


def _masked_window_stats(x: np.ndarray, y: np.ndarray, mask: np.ndarray, window: np.ndarray):
    """Renormalized window sums: denom, mu_x, mu_y, E[x^2], E[y^2], E[xy]."""
    h, w = mask.shape
    valid = mask.astype(np.float64)
    xm = x * valid
    ym = y * valid
    denom = np.zeros((h, w))
    sx = np.zeros((h, w))
    sy = np.zeros((h, w))
    sxx = np.zeros((h, w))
    syy = np.zeros((h, w))
    sxy = np.zeros((h, w))
    for dv, du, g in _window_offsets(window):
        sl_c, sl_n = _shifted_views(valid, dv, du)
        denom[sl_c] += g * valid[sl_n]
        sx[sl_c] += g * xm[sl_n]
        sy[sl_c] += g * ym[sl_n]
        sxx[sl_c] += g * (xm * x)[sl_n]
        syy[sl_c] += g * (ym * y)[sl_n]
        sxy[sl_c] += g * (xm * y)[sl_n]
    safe = np.where(denom > 0, denom, 1.0)
    return denom, sx / safe, sy / safe, sxx / safe, syy / safe, sxy / safe


def _ssim_terms(mu_x, mu_y, exx, eyy, exy):
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    sxx = exx - mu_x**2
    syy = eyy - mu_y**2
    sxy = exy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * sxy + c2
    b1 = mu_x**2 + mu_y**2 + c1
    b2 = sxx + syy + c2
    return a1, a2, b1, b2


def masked_ssim(x: np.ndarray, y: np.ndarray, mask: np.ndarray,
                window: np.ndarray = None) -> float:
    """Mean SSIM over masked pixels of a single channel; out-of-mask pixels are
    excluded from window statistics by weight renormalization."""
    if not mask.any():
        raise EmptyMask("mask is empty")
    window = gaussian_window() if window is None else window
    _, mu_x, mu_y, exx, eyy, exy = _masked_window_stats(x, y, mask, window)
    a1, a2, b1, b2 = _ssim_terms(mu_x, mu_y, exx, eyy, exy)
    smap = (a1 * a2) / (b1 * b2)
    return float(smap[mask].mean())


def masked_ssim_backward(x: np.ndarray, y: np.ndarray, mask: np.ndarray,
                         window: np.ndarray = None) -> np.ndarray:
    """d(mean masked SSIM)/dx, same shape as x (single channel)."""
    window = gaussian_window() if window is None else window
    denom, mu_x, mu_y, exx, eyy, exy = _masked_window_stats(x, y, mask, window)
    a1, a2, b1, b2 = _ssim_terms(mu_x, mu_y, exx, eyy, exy)
    d = b1 * b2
    smap = (a1 * a2) / d
    # partials holding the raw window sums as the independent quantities
    ds_dmu = 2 * mu_y * (a2 - a1) / d - 2 * mu_x * smap * (1 / b1 - 1 / b2)
    ds_dexx = -smap / b2
    ds_dexy = 2 * a1 / d

    m = mask.astype(np.float64) / mask.sum()
    safe = np.where(denom > 0, denom, 1.0)
    w1 = m * ds_dmu / safe
    w2 = m * ds_dexx / safe
    w3 = m * ds_dexy / safe
    grad = np.zeros_like(x)
    valid = mask.astype(np.float64)
    for dv, du, g in _window_offsets(window):
        sl_c, sl_n = _shifted_views(valid, dv, du)
        contrib = g * (w1[sl_c] + 2 * x[sl_n] * w2[sl_c] + y[sl_n] * w3[sl_c])
        grad[sl_n] += contrib * valid[sl_n]
    return grad


def compute_losses(color, depth, gt_rgb, gt_depth, mask, weights: LossWeights):
    """(total, l_rgb, l_ssim, l_depth) over the interior mask.

    Depth is additionally restricted to pixels with valid reference depth
    (gt_depth > 0); with none, the depth term is zero.
    """
    if not mask.any():
        raise EmptyMask("mask is empty")
    l_rgb = float(np.abs(color - gt_rgb)[mask].mean())  # mean over pixels x channels
    l_ssim = 1.0 - np.mean([masked_ssim(color[..., ch], gt_rgb[..., ch], mask)
                            for ch in range(3)])
    dmask = mask & (gt_depth > 0)
    l_depth = float(np.abs(depth - gt_depth)[dmask].mean()) if dmask.any() else 0.0
    total = weights.l_rgb * l_rgb + weights.l_ssim * l_ssim + weights.l_depth * l_depth
    return total, l_rgb, float(l_ssim), l_depth


def losses_backward(color, depth, gt_rgb, gt_depth, mask, weights: LossWeights):
    """Image-space gradients (d_color, d_depth) of the weighted total loss.

    L1 subgradient at zero residual is 0.
    """
    if not mask.any():
        raise EmptyMask("mask is empty")
    n = int(mask.sum())
    d_color = np.zeros_like(color)
    if weights.l_rgb > 0:
        d_color += weights.l_rgb * np.sign(color - gt_rgb) * mask[..., None] / (3 * n)
    if weights.l_ssim > 0:
        for ch in range(3):
            d_color[..., ch] += -weights.l_ssim / 3.0 * masked_ssim_backward(
                color[..., ch], gt_rgb[..., ch], mask)
    d_depth = np.zeros_like(depth)
    dmask = mask & (gt_depth > 0)
    if weights.l_depth > 0 and dmask.any():
        d_depth = weights.l_depth * np.sign(depth - gt_depth) * dmask / dmask.sum()
    return d_color, d_depth
