"""Hash-indexed voxel map over world-frame colored points.

Per voxel: PCA fit of the point distribution, planar/linear/unreliable
classification, first-order propagation of point covariances into a 6x6
descriptor covariance (selected direction + mean), and the derived
rotation/log-scale prior handed to Gaussian initialization.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import matrix_to_quat


class TooFewPoints(ValueError):
    """Voxel holds fewer points than the fitting minimum."""


class DegenerateSpectrum(ValueError):
    """Eigen-gap below tolerance; the selected eigenvector is unstable."""


class VoxelClass(enum.Enum):
    PLANAR = "planar"
    LINEAR = "linear"
    UNRELIABLE = "unreliable"


@dataclass
class PointCloud:
    """World-frame colored points with per-point 3x3 covariances."""

    positions: np.ndarray  # (N, 3) m
    colors: np.ndarray  # (N, 3) in [0, 1]
    covariances: np.ndarray  # (N, 3, 3) m^2

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(n, 3, 3)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def isotropic(cls, positions, colors, sigma: float) -> "PointCloud":
        n = len(positions)
        covs = np.broadcast_to(np.eye(3) * sigma**2, (n, 3, 3)).copy()
        return cls(positions, colors, covs)


@dataclass
class VoxelStats:
    """PCA result for one voxel; eigenvalues ascending, V columns match."""

    mean: np.ndarray  # (3,)
    eigenvalues: np.ndarray  # (3,) ascending, m^2
    eigenvectors: np.ndarray  # (3, 3) columns [v_min, v_mid, v_max], det +1
    count: int
    voxel_class: VoxelClass | None = None
    descriptor_cov: np.ndarray | None = None  # (6, 6)
    reliable: bool = False


@dataclass
class GeomPrior:
    """Per-point orientation/scale prior; axes ordered (major, mid, minor)."""

    rotation: np.ndarray  # (4,) unit quaternion
    log_scale: np.ndarray  # (3,) log-meters
    reliable: bool


def voxel_index(p: np.ndarray, voxel_size: float) -> tuple:
    """Integer voxel key: floor(p / voxel_size) componentwise."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    return tuple(np.floor(np.asarray(p, dtype=np.float64) / voxel_size).astype(np.int64))


def voxel_indices(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    return np.floor(np.asarray(positions, dtype=np.float64) / voxel_size).astype(np.int64)


def _fix_eigenvector_signs(V: np.ndarray) -> np.ndarray:
    """Deterministic signs: largest-|component| entry positive, then det +1.

    det is restored by negating the minor axis, which never changes the
    classification directions (those are sign-free).
    """
    V = V.copy()
    for c in range(3):
        i = int(np.argmax(np.abs(V[:, c])))
        if V[i, c] < 0:
            V[:, c] = -V[:, c]
    if np.linalg.det(V) < 0:
        V[:, 0] = -V[:, 0]
    return V


def fit_voxel(positions: np.ndarray, n_min: int = 10) -> VoxelStats:
    """Mean + covariance + eigen-decomposition of one voxel's points."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if n < n_min:
        raise TooFewPoints(f"{n} < {n_min}")
    mean = positions.mean(axis=0)
    centered = positions - mean
    C = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(C)
    evals = np.maximum(evals, 0.0)  # clip tiny negative rounding
    return VoxelStats(mean=mean, eigenvalues=evals, eigenvectors=_fix_eigenvector_signs(evecs), count=n)


def classify(
    stats: VoxelStats,
    tau_p: float,
    tau_l: float,
    require_mid_above_tau_p: bool = False,
) -> VoxelClass:
    """Planar if lambda_min < tau_p, else linear if lambda_max/lambda_min > tau_l."""
    lmin, lmid, lmax = stats.eigenvalues
    if lmin < tau_p and not (require_mid_above_tau_p and lmid < tau_p):
        return VoxelClass.PLANAR
    if lmax / max(lmin, 1e-12) > tau_l:
        return VoxelClass.LINEAR
    return VoxelClass.UNRELIABLE


def descriptor_covariance(
    positions: np.ndarray,
    point_covs: np.ndarray,
    stats: VoxelStats,
    k: int,
    min_gap: float = 1e-10,
) -> np.ndarray:
    """First-order covariance of the voxel descriptor (v_k, mean).

    Per point, the Jacobian stacks the eigenvector-perturbation rows
    V @ F_i over the mean row I/N; F_i row m is zero for m == k and
    (p_i - mu)^T (v_m v_k^T + v_k v_m^T) / (N (lambda_k - lambda_m))
    otherwise. Raises DegenerateSpectrum when an eigen-gap involving the
    selected axis k falls below min_gap.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    point_covs = np.asarray(point_covs, dtype=np.float64).reshape(len(positions), 3, 3)
    n = len(positions)
    lam = stats.eigenvalues
    V = stats.eigenvectors
    vk = V[:, k]
    e = positions - stats.mean  # (n, 3)

    F = np.zeros((n, 3, 3))
    for m in range(3):
        if m == k:
            continue
        gap = lam[k] - lam[m]
        if abs(gap) < min_gap:
            raise DegenerateSpectrum(f"|lambda_{k} - lambda_{m}| = {abs(gap):.3e}")
        vm = V[:, m]
        # (e . v_m) v_k^T + (e . v_k) v_m^T, row 3-vector per point
        F[:, m, :] = ((e @ vm)[:, None] * vk[None, :] + (e @ vk)[:, None] * vm[None, :]) / (n * gap)

    VF = np.einsum("ab,nbc->nac", V, F)  # (n, 3, 3), rows of the direction block
    tl = np.einsum("nij,njk,nlk->il", VF, point_covs, VF)
    tr = np.einsum("nij,njk->ik", VF, point_covs) / n
    br = point_covs.sum(axis=0) / n**2
    sigma_g = np.zeros((6, 6))
    sigma_g[:3, :3] = tl
    sigma_g[:3, 3:] = tr
    sigma_g[3:, :3] = tr.T
    sigma_g[3:, 3:] = br
    return sigma_g


def reliability(sigma_g: np.ndarray, tau_trace: float) -> bool:
    """Reliable iff the direction block's trace is strictly below tau_trace."""
    return float(np.trace(sigma_g[:3, :3])) < tau_trace


def geom_prior(stats: VoxelStats, eps_lambda: float = 1e-8) -> GeomPrior:
    """Rotation from eigenvectors (major, mid, minor) and half-log eigenvalue scales.

    Eigenvalues are floored at eps_lambda before the log; exact planes or
    lines would otherwise produce infinite scales.
    """
    R = stats.eigenvectors[:, [2, 1, 0]].copy()
    if np.linalg.det(R) < 0:
        R[:, 2] = -R[:, 2]
    lam = np.maximum(stats.eigenvalues[[2, 1, 0]], eps_lambda)
    return GeomPrior(rotation=matrix_to_quat(R), log_scale=0.5 * np.log(lam), reliable=stats.reliable)


# ---------------------------------------------------------------------------
# voxel map
# ---------------------------------------------------------------------------

@dataclass
class _VoxelData:
    positions: list = field(default_factory=list)
    covariances: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    stats: VoxelStats | None = None
    prior: GeomPrior | None = None
    dirty: bool = True


class VoxelMap:
    """Single-writer flat hash grid of voxels with cached PCA priors."""

    def __init__(
        self,
        voxel_size: float = 0.5,
        tau_p: float = 0.0025,
        tau_l: float = 25.0,
        tau_trace: float = 1e-3,
        n_min: int = 10,
        eps_lambda: float = 1e-8,
        require_mid_above_tau_p: bool = False,
        window_frames: int = 0,
    ):
        self.voxel_size = float(voxel_size)
        self.tau_p = tau_p
        self.tau_l = tau_l
        self.tau_trace = tau_trace
        self.n_min = n_min
        self.eps_lambda = eps_lambda
        self.require_mid_above_tau_p = require_mid_above_tau_p
        # > 0: fits use only points from the last window_frames frame indices;
        # under odometry drift a revisited voxel otherwise mixes displaced
        # copies of the surface and stops classifying as planar
        self.window_frames = int(window_frames)
        self.latest_frame = 0
        self.voxels: dict[tuple, _VoxelData] = {}

    def __len__(self) -> int:
        return len(self.voxels)

    def insert(self, cloud: PointCloud, frame_index: int = 0) -> set:
        """Insert points; returns the touched voxel keys (marked dirty)."""
        keys = voxel_indices(cloud.positions, self.voxel_size)
        self.latest_frame = max(self.latest_frame, frame_index)
        touched = set()
        for i, key in enumerate(map(tuple, keys)):
            vox = self.voxels.setdefault(key, _VoxelData())
            vox.positions.append(cloud.positions[i])
            vox.covariances.append(cloud.covariances[i])
            vox.frames.append(frame_index)
            vox.dirty = True
            touched.add(key)
        return touched

    def refit(self, key: tuple) -> None:
        """Fit + classify + descriptor covariance + prior for one voxel."""
        vox = self.voxels[key]
        vox.dirty = False
        vox.stats = None
        vox.prior = None
        if self.window_frames > 0:
            oldest = self.latest_frame - self.window_frames
            if any(f < oldest for f in vox.frames):
                keep = [i for i, f in enumerate(vox.frames) if f >= oldest]
                vox.positions = [vox.positions[i] for i in keep]
                vox.covariances = [vox.covariances[i] for i in keep]
                vox.frames = [vox.frames[i] for i in keep]
        if len(vox.positions) < self.n_min:
            return
        positions = np.array(vox.positions)
        covs = np.array(vox.covariances)
        stats = fit_voxel(positions, self.n_min)
        stats.voxel_class = classify(stats, self.tau_p, self.tau_l, self.require_mid_above_tau_p)
        if stats.voxel_class is VoxelClass.UNRELIABLE:
            stats.reliable = False
        else:
            k = 0 if stats.voxel_class is VoxelClass.PLANAR else 2
            try:
                stats.descriptor_cov = descriptor_covariance(positions, covs, stats, k)
                stats.reliable = reliability(stats.descriptor_cov, self.tau_trace)
            except DegenerateSpectrum:
                stats.voxel_class = VoxelClass.UNRELIABLE
                stats.reliable = False
        vox.stats = stats
        vox.prior = geom_prior(stats, self.eps_lambda)

    def refit_dirty(self, keys) -> None:
        for key in keys:
            if self.voxels[key].dirty:
                self.refit(key)

    def prior_at(self, p: np.ndarray) -> GeomPrior | None:
        """Prior of the voxel containing p; refits lazily if stale."""
        key = voxel_index(p, self.voxel_size)
        vox = self.voxels.get(key)
        if vox is None:
            return None
        if vox.dirty:
            self.refit(key)
        return vox.prior

    def process(self, cloud: PointCloud) -> list:
        """Insert, refit touched voxels, and return one prior per point.

        Points in voxels below the fitting minimum get an unreliable
        identity prior.
        """
        self.insert(cloud)
        return self.priors_for(cloud.positions)

    def priors_for(self, positions: np.ndarray) -> list:
        fallback = GeomPrior(np.array([1.0, 0, 0, 0]), np.zeros(3), reliable=False)
        return [self.prior_at(p) or fallback for p in positions]


# ---------------------------------------------------------------------------
# point-cloud files: ASCII PLY (x y z red green blue) + covariance sidecar
# ---------------------------------------------------------------------------

def save_point_cloud_ply(path, cloud: PointCloud, with_covariance_sidecar: bool = True) -> None:
    """ASCII PLY; covariances go to <path>.cov (9 LE doubles per point)."""
    path = Path(path)
    n = len(cloud)
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {n}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for p, c in zip(cloud.positions.astype(np.float32), rgb):
            f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
    if with_covariance_sidecar:
        with open(path.with_suffix(path.suffix + ".cov"), "wb") as f:
            f.write(struct.pack("<q", n))
            f.write(cloud.covariances.astype("<f8").tobytes())


def load_point_cloud_ply(path) -> PointCloud:
    path = Path(path)
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = 0
        props = []
        while True:
            line = f.readline().strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
            elif line.startswith("format") and "ascii" not in line:
                raise ValueError(f"{path}: only ASCII PLY supported")
        rows = [f.readline().split() for _ in range(n)]
    data = np.array(rows, dtype=np.float64)
    col = {name: i for i, name in enumerate(props)}
    positions = data[:, [col["x"], col["y"], col["z"]]]
    if "red" in col:
        colors = data[:, [col["red"], col["green"], col["blue"]]] / 255.0
    else:
        colors = np.full((n, 3), 0.5)
    sidecar = path.with_suffix(path.suffix + ".cov")
    if sidecar.exists():
        with open(sidecar, "rb") as f:
            (m,) = struct.unpack("<q", f.read(8))
            if m != n:
                raise ValueError(f"{sidecar}: point count mismatch ({m} != {n})")
            covs = np.frombuffer(f.read(), dtype="<f8").reshape(n, 3, 3).copy()
    else:
        covs = np.zeros((n, 3, 3))
    return PointCloud(positions, colors, covs)
