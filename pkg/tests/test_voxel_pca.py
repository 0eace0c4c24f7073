import numpy as np
import pytest

from splatmap.geom import quat_to_matrix
from splatmap.voxel_pca import (
    DegenerateSpectrum,
    PointCloud,
    TooFewPoints,
    VoxelClass,
    VoxelMap,
    VoxelStats,
    classify,
    descriptor_covariance,
    fit_voxel,
    geom_prior,
    load_point_cloud_ply,
    reliability,
    save_point_cloud_ply,
    voxel_index,
    voxel_indices,
)


# --- voxel indexing ---------------------------------------------------------

def test_voxel_index_floor():
    assert voxel_index([0.49, 0, 0], 0.5) == (0, 0, 0)


def test_voxel_index_negative_floor():
    assert voxel_index([-0.01, 0, 0], 0.5) == (-1, 0, 0)


def test_same_key_points_are_close():
    rng = np.random.default_rng(0)
    size = 0.37
    pts = rng.uniform(-5, 5, size=(10_000, 3))
    keys = voxel_indices(pts, size)
    order = np.lexsort(keys.T)
    pts, keys = pts[order], keys[order]
    limit = size * np.sqrt(3)
    start = 0
    for i in range(1, len(pts) + 1):
        if i == len(pts) or np.any(keys[i] != keys[start]):
            block = pts[start:i]
            if len(block) > 1:
                d = np.linalg.norm(block[:, None] - block[None, :], axis=-1)
                assert d.max() < limit
            start = i


# --- PCA fitting ------------------------------------------------------------

def cube_corners(side=1.0):
    g = np.array([-0.5, 0.5]) * side
    return np.array([[x, y, z] for x in g for y in g for z in g])


def test_fit_cube_corners():
    stats = fit_voxel(cube_corners(), n_min=8)
    assert np.allclose(stats.mean, 0, atol=1e-12)
    assert np.allclose(stats.eigenvalues, 0.25, atol=1e-12)


def test_fit_plane_z0():
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(-1, 1, 40), rng.uniform(-1, 1, 40), np.zeros(40)])
    stats = fit_voxel(pts)
    assert stats.eigenvalues[0] < 1e-12
    v_min = stats.eigenvectors[:, 0]
    assert np.isclose(abs(v_min[2]), 1.0, atol=1e-9)


def test_fit_line_x_axis():
    pts = np.column_stack([np.linspace(-1, 1, 30), np.zeros(30), np.zeros(30)])
    stats = fit_voxel(pts)
    assert stats.eigenvalues[0] < 1e-15 and stats.eigenvalues[1] < 1e-15
    assert np.isclose(abs(stats.eigenvectors[0, 2]), 1.0, atol=1e-9)


def test_fit_too_few_points():
    with pytest.raises(TooFewPoints):
        fit_voxel(np.zeros((5, 3)), n_min=10)


def eigvals_characteristic_cubic(C):
    """Brute-force oracle: closed-form roots of the characteristic cubic."""
    q = np.trace(C) / 3.0
    p1 = C[0, 1] ** 2 + C[0, 2] ** 2 + C[1, 2] ** 2
    p2 = sum((C[i, i] - q) ** 2 for i in range(3)) + 2 * p1
    if p2 < 1e-30:
        return np.array([q, q, q])
    p = np.sqrt(p2 / 6.0)
    B = (C - q * np.eye(3)) / p
    r = np.clip(np.linalg.det(B) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2 * p * np.cos(phi)
    e3 = q + 2 * p * np.cos(phi + 2 * np.pi / 3)
    return np.array(sorted([e3, 3 * q - e1 - e3, e1]))


def test_pca_eigenvalues_match_cubic_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = rng.integers(10, 21)
        pts = rng.normal(scale=rng.uniform(0.05, 1.0, size=3), size=(n, 3))
        stats = fit_voxel(pts)
        centered = pts - pts.mean(axis=0)
        C = centered.T @ centered / n
        assert np.allclose(stats.eigenvalues, eigvals_characteristic_cubic(C), atol=1e-8)
        # eigen equation CV = V Lambda
        assert np.allclose(C @ stats.eigenvectors,
                           stats.eigenvectors * stats.eigenvalues, atol=1e-9)
        assert np.isclose(np.linalg.det(stats.eigenvectors), 1.0, atol=1e-9)


# --- classification ----------------------------------------------------------

def make_stats(evals):
    return VoxelStats(mean=np.zeros(3), eigenvalues=np.array(evals, float),
                      eigenvectors=np.eye(3), count=10)


def test_classify_planar():
    assert classify(make_stats([1e-6, 0.1, 0.1]), tau_p=1e-4, tau_l=25) is VoxelClass.PLANAR


def test_classify_linear():
    s = make_stats([4e-4, 5e-4, 0.5])
    assert classify(s, tau_p=1e-4, tau_l=25) is VoxelClass.LINEAR


def test_classify_unreliable():
    s = make_stats([0.01, 0.01, 0.01])
    assert classify(s, tau_p=1e-4, tau_l=25) is VoxelClass.UNRELIABLE


def test_classify_perfect_line_is_planar_by_default():
    # literal planar-first ordering; optional flag diverts to linear
    s = make_stats([0.0, 0.0, 1.0])
    assert classify(s, tau_p=1e-4, tau_l=25) is VoxelClass.PLANAR
    assert classify(s, tau_p=1e-4, tau_l=25, require_mid_above_tau_p=True) is VoxelClass.LINEAR


# --- descriptor covariance ---------------------------------------------------

def planar_fixture(n=50, seed=3):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(-0.4, 0.4, n), rng.uniform(-0.3, 0.3, n), np.zeros(n)])
    return pts


def test_descriptor_covariance_zero_noise():
    pts = planar_fixture()
    stats = fit_voxel(pts)
    sg = descriptor_covariance(pts, np.zeros((len(pts), 3, 3)), stats, k=0)
    assert np.allclose(sg, 0)


def test_descriptor_covariance_mean_block():
    pts = planar_fixture()
    stats = fit_voxel(pts)
    sigma = 0.02
    covs = np.broadcast_to(np.eye(3) * sigma**2, (len(pts), 3, 3))
    sg = descriptor_covariance(pts, covs, stats, k=0)
    assert np.allclose(sg[3:, 3:], np.eye(3) * sigma**2 / len(pts), atol=1e-12)
    assert np.allclose(sg, sg.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(sg) > -1e-9)


def test_descriptor_covariance_linear_scaling():
    pts = planar_fixture()
    stats = fit_voxel(pts)
    covs = np.broadcast_to(np.eye(3) * 1e-4, (len(pts), 3, 3))
    sg1 = descriptor_covariance(pts, covs, stats, k=0)
    sg2 = descriptor_covariance(pts, 2 * covs, stats, k=0)
    assert np.allclose(sg2, 2 * sg1, atol=1e-9)


def test_descriptor_covariance_degenerate_spectrum():
    stats = fit_voxel(cube_corners(), n_min=8)
    covs = np.broadcast_to(np.eye(3) * 1e-4, (8, 3, 3))
    with pytest.raises(DegenerateSpectrum):
        descriptor_covariance(cube_corners(), covs, stats, k=0)


def montecarlo_direction_mean_cov(base, sigma, trials, seed, k=0):
    """Oracle: resample noisy points, refit PCA, measure empirical covariance
    of the (sign-aligned) selected eigenvector and the mean."""
    rng = np.random.default_rng(seed)
    nominal = fit_voxel(base)
    v_ref = nominal.eigenvectors[:, k]
    samples = np.empty((trials, 6))
    for t in range(trials):
        pts = base + rng.normal(scale=sigma, size=base.shape)
        mean = pts.mean(axis=0)
        centered = pts - mean
        evals, evecs = np.linalg.eigh(centered.T @ centered / len(pts))
        v = evecs[:, k]
        if v @ v_ref < 0:
            v = -v
        samples[t, :3] = v
        samples[t, 3:] = mean
    d = samples - samples.mean(axis=0)
    return d.T @ d / trials


def test_descriptor_covariance_matches_monte_carlo():
    base = planar_fixture(n=50, seed=3)
    sigma = 0.01
    stats = fit_voxel(base)
    covs = np.broadcast_to(np.eye(3) * sigma**2, (len(base), 3, 3))
    sg = descriptor_covariance(base, covs, stats, k=0)
    emp = montecarlo_direction_mean_cov(base, sigma, trials=10_000, seed=42)
    tr_analytic = np.trace(sg[:3, :3])
    tr_emp = np.trace(emp[:3, :3])
    assert abs(tr_analytic - tr_emp) < 0.2 * tr_emp
    # reliability against a threshold calibrated off the oracle
    assert reliability(sg, tau_trace=2 * tr_emp)


def test_reliability_boundary_is_strict():
    sg = np.zeros((6, 6))
    assert reliability(sg, tau_trace=1e-3)
    sg[0, 0] = 1e-3
    assert not reliability(sg, tau_trace=1e-3)  # trace == tau -> unreliable


# --- geometric prior ----------------------------------------------------------

def test_geom_prior_sqrt_eigenvalues():
    s = make_stats([0.01, 0.04, 0.09])
    s.reliable = True
    prior = geom_prior(s)
    assert np.allclose(np.exp(prior.log_scale), [0.3, 0.2, 0.1], atol=1e-12)
    assert prior.reliable


def test_geom_prior_floor_on_exact_plane():
    s = make_stats([0.0, 0.04, 0.09])
    prior = geom_prior(s, eps_lambda=1e-8)
    assert np.isclose(prior.log_scale[2], 0.5 * np.log(1e-8))


def test_geom_prior_rotation_orthonormal():
    stats = fit_voxel(planar_fixture())
    prior = geom_prior(stats)
    assert np.isclose(np.linalg.norm(prior.rotation), 1.0, atol=1e-9)
    R = quat_to_matrix(prior.rotation)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-9)


# --- invariance properties ------------------------------------------------------

def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def test_rigid_invariance():
    rng = np.random.default_rng(8)
    pts = planar_fixture(n=40, seed=9) + np.array([0.0, 0.0, 0.01]) * np.sin(np.arange(40))[:, None]
    covs = np.broadcast_to(np.eye(3) * 1e-4, (40, 3, 3)).copy()
    stats = fit_voxel(pts)
    sg = descriptor_covariance(pts, covs, stats, k=0)

    R = random_rotation(rng)
    t = rng.normal(size=3)
    pts_r = pts @ R.T + t
    covs_r = np.einsum("ij,njk,lk->nil", R, covs, R)
    stats_r = fit_voxel(pts_r)
    sg_r = descriptor_covariance(pts_r, covs_r, stats_r, k=0)

    assert np.allclose(stats_r.eigenvalues, stats.eigenvalues, atol=1e-9)
    assert np.allclose(stats_r.mean, R @ stats.mean + t, atol=1e-9)
    tau_p, tau_l = 2.5e-3, 25.0
    assert classify(stats_r, tau_p, tau_l) == classify(stats, tau_p, tau_l)
    # direction and mean blocks conjugate by R (sign of v_k cancels in each block)
    assert np.allclose(sg_r[:3, :3], R @ sg[:3, :3] @ R.T, atol=1e-9)
    assert np.allclose(sg_r[3:, 3:], R @ sg[3:, 3:] @ R.T, atol=1e-9)
    flip = np.sign(stats_r.eigenvectors[:, 0] @ (R @ stats.eigenvectors[:, 0]))
    assert np.allclose(sg_r[:3, 3:], flip * R @ sg[:3, 3:] @ R.T, atol=1e-9)


def test_incremental_insert_matches_batch_fit():
    rng = np.random.default_rng(12)
    pts = rng.uniform(0, 0.5, size=(60, 3))
    colors = rng.uniform(0, 1, size=(60, 3))
    cloud = PointCloud.isotropic(pts, colors, sigma=0.01)

    incremental = VoxelMap(voxel_size=0.5)
    incremental.process(PointCloud.isotropic(pts[:25], colors[:25], 0.01))
    incremental.process(PointCloud.isotropic(pts[25:], colors[25:], 0.01))
    batch = VoxelMap(voxel_size=0.5)
    batch.process(cloud)

    assert set(incremental.voxels) == set(batch.voxels)
    for key in batch.voxels:
        a, b = incremental.voxels[key].stats, batch.voxels[key].stats
        assert np.allclose(a.mean, b.mean, atol=1e-9)
        assert np.allclose(a.eigenvalues, b.eigenvalues, atol=1e-9)


def test_voxel_map_priors_on_synthetic_plane():
    rng = np.random.default_rng(15)
    n = 400
    pts = np.column_stack([rng.uniform(0, 2, n), rng.uniform(0, 2, n),
                           rng.normal(scale=0.005, size=n)])
    cloud = PointCloud.isotropic(pts, np.full((n, 3), 0.5), sigma=0.005)
    vmap = VoxelMap(voxel_size=0.5, tau_p=0.0025, tau_trace=1e-3)
    priors = vmap.process(cloud)
    reliable = [p for p in priors if p.reliable]
    assert len(reliable) > 0.8 * n
    for p in reliable[:20]:
        R = quat_to_matrix(p.rotation)
        # minor axis (third column) is the plane normal
        assert abs(R[2, 2]) > 0.99


# --- PLY round trip ---------------------------------------------------------------

def test_ply_roundtrip_with_covariance(tmp_path):
    rng = np.random.default_rng(30)
    n = 17
    cloud = PointCloud(rng.normal(size=(n, 3)),
                       rng.integers(0, 256, size=(n, 3)) / 255.0,
                       np.einsum("nij,nkj->nik", rng.normal(size=(n, 3, 3)) * 0.01,
                                 rng.normal(size=(n, 3, 3)) * 0.01))
    path = tmp_path / "pts.ply"
    save_point_cloud_ply(path, cloud)
    loaded = load_point_cloud_ply(path)
    assert np.allclose(loaded.positions, cloud.positions, atol=1e-6)
    assert np.allclose(loaded.colors, cloud.colors, atol=0.5 / 255)
    assert np.allclose(loaded.covariances, cloud.covariances)
