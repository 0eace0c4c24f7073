import numpy as np

from splatmap.geom import Camera, Pose, quat_normalize, se3_exp
from splatmap.primitives import GaussianCloud
from splatmap.render import RenderConfig, render


def small_camera(size=16, f=20.0):
    return Camera(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size)


def random_scene(seed, n=5, cam=None):
    """Seeded 5-Gaussian scene inside the camera frustum, parameters kept
    away from the alpha clamp and color saturation so the loss is smooth."""
    rng = np.random.default_rng(seed)
    cam = cam or small_camera()
    z = rng.uniform(2.0, 6.0, n)
    x = (rng.uniform(0.2, 0.8, n) * cam.width - cam.cx) * z / cam.fx
    y = (rng.uniform(0.2, 0.8, n) * cam.height - cam.cy) * z / cam.fy
    means = np.column_stack([x, y, z])
    log_scales = rng.uniform(np.log(0.1), np.log(0.5), (n, 3))
    rotations = quat_normalize(rng.normal(size=(n, 4)))
    opacity_logits = rng.uniform(-1.0, 1.0, n)
    sh = np.zeros((n, 4, 3))
    sh[:, 0, :] = rng.uniform(-1.2, 1.2, (n, 3))
    sh[:, 1:, :] = rng.uniform(-0.15, 0.15, (n, 3, 3))
    cloud = GaussianCloud(means, log_scales, rotations, opacity_logits, sh)
    view = Pose.identity()
    return cloud, cam, view


def perturbed_clone(cloud, seed, scale=0.15):
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        cloud.means + rng.normal(scale=scale, size=cloud.means.shape),
        cloud.log_scales + rng.normal(scale=scale, size=cloud.log_scales.shape),
        quat_normalize(cloud.rotations + rng.normal(scale=scale, size=cloud.rotations.shape)),
        cloud.opacity_logits + rng.normal(scale=scale, size=cloud.opacity_logits.shape),
        cloud.sh + rng.normal(scale=scale / 2, size=cloud.sh.shape),
        cloud.segment_ids, cloud.frozen, cloud.source,
    )


def render_pose(pose_like=None):
    return Pose.identity() if pose_like is None else pose_like


def yaw_pose(angle, t=(0.0, 0.0, 0.0)):
    p = se3_exp([0, 0, angle, 0, 0, 0])
    return Pose(p.q, np.asarray(t, dtype=float))
