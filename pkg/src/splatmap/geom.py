"""SE(3) poses, quaternion algebra, pinhole cameras, and trajectory alignment.

Quaternion convention used everywhere in this package: (w, x, y, z),
Hamilton product, right-handed. Twist vectors are ordered
(rotation rad, translation m).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonPositiveDepth(ValueError):
    """Point lies at or behind the camera plane (z <= 0)."""


class DegenerateTrajectory(ValueError):
    """Translations are rank-deficient; the aligning rotation is not unique."""


# ---------------------------------------------------------------------------
# quaternion algebra
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, both (..., 4) in (w, x, y, z) order."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion; (..., 4) -> (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w>=0) of a rotation matrix, Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    tr = m00 + m11 + m22
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s])
    elif m00 >= m11 and m00 >= m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2.0
        q = np.array([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s])
    elif m11 >= m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2.0
        q = np.array([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s])
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2.0
        q = np.array([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors (..., 3) by a single unit quaternion."""
    return np.asarray(v, dtype=np.float64) @ quat_to_matrix(q).T


def quat_geodesic_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic distance on SO(3) between two unit quaternions, radians.

    atan2 form of the relative quaternion: stays accurate near zero, where
    the arccos of a dot product loses half the significant digits.
    """
    d = quat_multiply(quat_conjugate(a), b)
    return 2.0 * float(np.arctan2(np.linalg.norm(d[1:]), abs(d[0])))


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rotvec_to_quat(w: np.ndarray) -> np.ndarray:
    """exp map so(3) -> unit quaternion, stable for tiny angles."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-8:
        # sin(t/2)/t ~ 1/2 - t^2/48
        k = 0.5 - theta * theta / 48.0
        q = np.concatenate([[1.0 - theta * theta / 8.0], k * w])
    else:
        q = np.concatenate([[np.cos(0.5 * theta)], np.sin(0.5 * theta) / theta * w])
    return quat_normalize(q)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """log map unit quaternion -> so(3); returns the |angle| <= pi branch."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0:
        q = -q
    n = np.linalg.norm(q[1:])
    if n < 1e-12:
        return 2.0 * q[1:]
    theta = 2.0 * np.arctan2(n, q[0])
    return theta / n * q[1:]


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------

@dataclass
class Pose:
    """Rigid transform: rotation as unit quaternion (w,x,y,z) + translation (m)."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.q = quat_normalize(np.asarray(self.q, dtype=np.float64).reshape(4))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        """self * other (apply other first, then self)."""
        return Pose(quat_multiply(self.q, other.q), quat_rotate(self.q, other.t) + self.t)

    def inverse(self) -> "Pose":
        qinv = quat_conjugate(self.q)
        return Pose(qinv, -quat_rotate(qinv, self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points (..., 3)."""
        return quat_rotate(self.q, points) + self.t

    def copy(self) -> "Pose":
        # bitwise copy: bypasses __post_init__ so the quaternion is not
        # renormalized (renormalizing can flip last bits)
        p = Pose.__new__(Pose)
        p.q = self.q.copy()
        p.t = self.t.copy()
        return p


def se3_exp(twist: np.ndarray) -> Pose:
    """Exponential map of a twist (rotation rad, translation m) x 3 each."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    w, v = twist[:3], twist[3:]
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        A = 0.5 - theta * theta / 24.0
        B = 1.0 / 6.0 - theta * theta / 120.0
    else:
        A = (1.0 - np.cos(theta)) / theta**2
        B = (theta - np.sin(theta)) / theta**3
    V = np.eye(3) + A * K + B * (K @ K)
    return Pose(rotvec_to_quat(w), V @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Logarithm map; inverse of se3_exp for rotation angles below pi."""
    w = quat_to_rotvec(pose.q)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        c = 1.0 / 12.0 + theta * theta / 720.0
    else:
        half = 0.5 * theta
        c = (1.0 - half / np.tan(half)) / theta**2
    Vinv = np.eye(3) - 0.5 * K + c * (K @ K)
    return np.concatenate([w, Vinv @ pose.t])


def pose_geodesic_angle(a: Pose, b: Pose) -> float:
    return quat_geodesic_angle(a.q, b.q)


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole intrinsics; pixel (u, v) with u along width, v along height."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be >= 1")


def project(cam: Camera, p_cam: np.ndarray):
    """Project one camera-frame point; returns (pixel (2,), depth, in_image).

    Raises NonPositiveDepth for z <= 0 (behind-camera, treated as not visible
    by callers).
    """
    p = np.asarray(p_cam, dtype=np.float64).reshape(3)
    if p[2] <= 0:
        raise NonPositiveDepth(f"z={p[2]}")
    u = cam.fx * p[0] / p[2] + cam.cx
    v = cam.fy * p[1] / p[2] + cam.cy
    inside = (0.0 <= u < cam.width) and (0.0 <= v < cam.height)
    return np.array([u, v]), float(p[2]), inside


def project_points(cam: Camera, pts_cam: np.ndarray):
    """Vectorized projection of (N, 3) camera-frame points.

    Returns (pixels (N,2), depths (N,), in_image (N,) bool); points with
    z <= 0 are marked not in-image instead of raising.
    """
    pts = np.asarray(pts_cam, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    safe_z = np.where(z > 0, z, 1.0)
    u = cam.fx * pts[:, 0] / safe_z + cam.cx
    v = cam.fy * pts[:, 1] / safe_z + cam.cy
    inside = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=-1), z, inside


def unproject(cam: Camera, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Inverse of project for depth > 0."""
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    return np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])


# ---------------------------------------------------------------------------
# trajectory alignment / ATE
# ---------------------------------------------------------------------------

def umeyama_align(est: list, gt: list):
    """Rigid SE(3) alignment of two pose sequences (no scale).

    Minimizes sum ||T * est_i.t - gt_i.t||^2 over rigid T and returns
    (T, ate_rmse) where ate_rmse is the RMSE of residual translation norms
    after alignment. Raises DegenerateTrajectory when the translations are
    collinear (rotation not unique).
    """
    if len(est) != len(gt) or len(est) < 3:
        raise ValueError("need equally long sequences with >= 3 poses")
    a = np.array([p.t for p in est], dtype=np.float64)
    b = np.array([p.t for p in gt], dtype=np.float64)
    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    ac = a - mu_a
    bc = b - mu_b
    cov = bc.T @ ac / len(a)
    U, d, Vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateTrajectory("translation covariance rank < 2")
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_b - R @ mu_a
    residual = a @ R.T + t - b
    rmse = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
    return Pose.from_rt(R, t), rmse


# ---------------------------------------------------------------------------
# trajectory file format: TSV "timestamp tx ty tz qw qx qy qz"
# ---------------------------------------------------------------------------

def save_trajectory_tsv(path, timestamps, poses) -> None:
    with open(path, "w") as f:
        for ts, p in zip(timestamps, poses):
            vals = [ts, p.t[0], p.t[1], p.t[2], p.q[0], p.q[1], p.q[2], p.q[3]]
            f.write("\t".join(repr(float(v)) for v in vals) + "\n")


def load_trajectory_tsv(path):
    timestamps = []
    poses = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            vals = [float(x) for x in line.split()]
            timestamps.append(vals[0])
            poses.append(Pose(np.array(vals[4:8]), np.array(vals[1:4])))
    return timestamps, poses
