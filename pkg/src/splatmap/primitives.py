"""Gaussian primitives: single-record type, structure-of-arrays batch, and
the real spherical-harmonics basis used for view-dependent color."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geom import quat_normalize, quat_to_matrix

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def num_sh_bands(order: int) -> int:
    return (order + 1) ** 2


def color_to_dc(color: np.ndarray) -> np.ndarray:
    """DC coefficient reproducing a flat color: (c - 0.5) / Y00."""
    return (np.asarray(color, dtype=np.float64) - 0.5) / SH_C0


def sh_basis(dirs: np.ndarray, order: int) -> np.ndarray:
    """Basis values for unit directions (N, 3) -> (N, (order+1)^2)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    cols = [np.full(len(d), SH_C0)]
    if order >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if order >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if order >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(cols, axis=-1)


def sh_basis_jacobian(dirs: np.ndarray, order: int) -> np.ndarray:
    """d basis / d direction, (N, (order+1)^2, 3)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    zero = np.zeros(len(d))
    rows = [np.stack([zero, zero, zero], axis=-1)]
    if order >= 1:
        c1 = np.full(len(d), SH_C1)
        rows += [
            np.stack([zero, -c1, zero], axis=-1),
            np.stack([zero, zero, c1], axis=-1),
            np.stack([-c1, zero, zero], axis=-1),
        ]
    if order >= 2:
        rows += [
            SH_C2[0] * np.stack([y, x, zero], axis=-1),
            SH_C2[1] * np.stack([zero, z, y], axis=-1),
            SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=-1),
            SH_C2[3] * np.stack([z, zero, x], axis=-1),
            SH_C2[4] * np.stack([2 * x, -2 * y, zero], axis=-1),
        ]
    if order >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], axis=-1),
            SH_C3[1] * np.stack([y * z, x * z, x * y], axis=-1),
            SH_C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=-1),
            SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=-1),
            SH_C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=-1),
            SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=-1),
            SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], axis=-1),
        ]
    return np.stack(rows, axis=1)


class Source(enum.IntEnum):
    MODEL = 0
    PCA = 1
    HEURISTIC = 2


@dataclass
class Gaussian:
    """One splat. Scales are log-meters; color is SH with DC in band 0."""

    mean: np.ndarray  # (3,) world m
    log_scale: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) unit quaternion, world frame
    opacity_logit: float
    sh: np.ndarray  # (bands, 3)
    segment_id: int = -1
    frozen: bool = False
    source: Source = Source.HEURISTIC


class GaussianCloud:
    """Structure-of-arrays batch of Gaussians; canonical in-map layout."""

    FIELDS = ("means", "log_scales", "rotations", "opacity_logits", "sh",
              "segment_ids", "frozen", "source")

    def __init__(self, means, log_scales, rotations, opacity_logits, sh,
                 segment_ids=None, frozen=None, source=None):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = quat_normalize(np.asarray(rotations, dtype=np.float64).reshape(n, 4))
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(sh, dtype=np.float64)
        self.sh = sh.reshape(n, sh.shape[1] if n == 0 else -1, 3)
        self.segment_ids = (np.full(n, -1, dtype=np.int64) if segment_ids is None
                            else np.asarray(segment_ids, dtype=np.int64).reshape(n))
        self.frozen = (np.zeros(n, dtype=bool) if frozen is None
                       else np.asarray(frozen, dtype=bool).reshape(n))
        self.source = (np.full(n, int(Source.HEURISTIC), dtype=np.uint8) if source is None
                       else np.asarray(source, dtype=np.uint8).reshape(n))

    def __len__(self) -> int:
        return len(self.means)

    @property
    def n_bands(self) -> int:
        return self.sh.shape[1]

    @classmethod
    def empty(cls, n_bands: int) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros(0), np.zeros((0, n_bands, 3)))

    @classmethod
    def from_list(cls, gaussians: list) -> "GaussianCloud":
        if not gaussians:
            raise ValueError("empty list; use GaussianCloud.empty(n_bands)")
        return cls(
            [g.mean for g in gaussians],
            [g.log_scale for g in gaussians],
            [g.rotation for g in gaussians],
            [g.opacity_logit for g in gaussians],
            [g.sh for g in gaussians],
            [g.segment_id for g in gaussians],
            [g.frozen for g in gaussians],
            [int(g.source) for g in gaussians],
        )

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.means[i].copy(), self.log_scales[i].copy(),
                        self.rotations[i].copy(), float(self.opacity_logits[i]),
                        self.sh[i].copy(), int(self.segment_ids[i]),
                        bool(self.frozen[i]), Source(int(self.source[i])))

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(self.means[idx].copy(), self.log_scales[idx].copy(),
                             self.rotations[idx].copy(), self.opacity_logits[idx].copy(),
                             self.sh[idx].copy(), self.segment_ids[idx].copy(),
                             self.frozen[idx].copy(), self.source[idx].copy())

    def copy(self) -> "GaussianCloud":
        return self.subset(slice(None))

    def append(self, other: "GaussianCloud") -> None:
        if other.n_bands != self.n_bands and len(self) > 0 and len(other) > 0:
            raise ValueError("SH band count mismatch")
        for name in self.FIELDS:
            setattr(self, name, np.concatenate([getattr(self, name), getattr(other, name)]))

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def covariances(self) -> np.ndarray:
        """World-frame 3x3 covariances R diag(exp(2 s)) R^T."""
        R = quat_to_matrix(self.rotations)
        d = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", R, d, R)

    def colors_from(self, cam_center: np.ndarray, order: int | None = None) -> np.ndarray:
        """Per-Gaussian RGB seen from cam_center, clamped to [0, 1]."""
        order = int(np.sqrt(self.n_bands)) - 1 if order is None else order
        delta = self.means - np.asarray(cam_center, dtype=np.float64)
        dirs = delta / np.maximum(np.linalg.norm(delta, axis=1, keepdims=True), 1e-12)
        basis = sh_basis(dirs, order)
        raw = 0.5 + np.einsum("nb,nbc->nc", basis, self.sh[:, : basis.shape[1], :])
        return np.clip(raw, 0.0, 1.0)
