import numpy as np
import pytest

from splatmap.ffm import (
    AttributeMaps,
    DimensionMismatch,
    DirectoryFfmProvider,
    NullFfmProvider,
    StubFfmProvider,
    load_attribute_maps,
    make_provider,
    save_attribute_maps,
)
from splatmap.gauss_init import (
    VIEW_CUR,
    VIEW_PREV,
    EmptySegment,
    Frame,
    InitConfig,
    ModelAttrs,
    cascade_init,
    close_segment,
    compute_beta,
    pick_view,
    resolve_pixel_conflicts,
    sample_model_attrs,
    select_keyframe,
    select_loopframe,
)
from splatmap.geom import Camera, Pose, quat_to_matrix, se3_exp, unproject
from splatmap.primitives import SH_C0, Source
from splatmap.voxel_pca import PointCloud

CAM = Camera(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64)


def make_frame(index, pose, n_points=0, rng=None, rgb=None, depth=None,
               positions=None, reliable=None):
    if rgb is None:
        rgb = np.full((CAM.height, CAM.width, 3), 0.5)
    if depth is None:
        depth = np.zeros((CAM.height, CAM.width))
    if positions is None:
        rng = rng or np.random.default_rng(0)
        positions = pose.apply(np.column_stack([
            rng.uniform(-1, 1, n_points), rng.uniform(-1, 1, n_points),
            rng.uniform(2, 5, n_points)]))
    n = len(positions)
    frame = Frame(index=index, pose=pose, rgb=rgb, depth=depth,
                  points=PointCloud.isotropic(positions, np.full((n, 3), 0.5), 0.01))
    frame.prior_rotations = np.tile([1.0, 0, 0, 0], (n, 1))
    frame.prior_log_scales = np.full((n, 3), np.log(0.05))
    frame.prior_reliable = (np.zeros(n, dtype=bool) if reliable is None
                            else np.asarray(reliable, bool))
    return frame


# --- keyframe / loopframe selection -----------------------------------------

def test_select_keyframe():
    assert select_keyframe(0, 5)
    assert not select_keyframe(7, 5)
    assert all(select_keyframe(i, 1) for i in range(10))


def test_select_loopframe():
    p0 = Pose.identity()
    assert not select_loopframe(p0, p0, tau_t=2.0, tau_r=np.deg2rad(15))
    moved = Pose(np.array([1.0, 0, 0, 0]), np.array([3.0, 0, 0]))
    assert select_loopframe(moved, p0, tau_t=2.0, tau_r=np.deg2rad(15))
    yawed = se3_exp([0, 0, np.deg2rad(20), 0, 0, 0])
    assert select_loopframe(yawed, p0, tau_t=2.0, tau_r=np.deg2rad(15))


# --- stub provider ------------------------------------------------------------

def test_stub_constant_image_all_invalid():
    rgb = np.full((16, 16, 3), 0.3)
    prev, cur = StubFfmProvider().predict(rgb, rgb)
    assert not prev.valid.any() and not cur.valid.any()


def test_stub_valid_pixels_unit_quaternions():
    rng = np.random.default_rng(1)
    rgb = rng.uniform(0, 1, size=(16, 16, 3))
    _, maps = StubFfmProvider().predict(rgb, rgb)
    assert maps.valid.any()
    norms = np.linalg.norm(maps.rotation[maps.valid], axis=-1)
    assert np.allclose(norms, 1.0, atol=1e-6)
    assert np.all(maps.scale_shape[maps.valid] > 0)


def test_stub_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        StubFfmProvider().predict(np.zeros((8, 8, 3)), np.zeros((9, 8, 3)))


def test_file_provider_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(2)
    rgb = rng.uniform(0, 1, size=(12, 10, 3))
    prev, cur = StubFfmProvider().predict(rgb, rgb[::-1].copy())
    save_attribute_maps(tmp_path / "pair_000000_000005", prev, cur)
    p2, c2 = load_attribute_maps(tmp_path / "pair_000000_000005")
    for a, b in ((prev, p2), (cur, c2)):
        assert np.array_equal(a.rotation, b.rotation)
        assert np.array_equal(a.scale_shape, b.scale_shape)
        assert np.array_equal(a.opacity_logit, b.opacity_logit)
        assert np.array_equal(a.sh, b.sh)
        assert np.array_equal(a.valid, b.valid)
    provider = DirectoryFfmProvider(tmp_path)
    p3, _ = provider.predict(rgb, rgb, 0, 5)
    assert np.array_equal(p3.rotation, prev.rotation)


def test_make_provider_specs(tmp_path):
    assert isinstance(make_provider("stub"), StubFfmProvider)
    assert isinstance(make_provider("off"), NullFfmProvider)
    assert isinstance(make_provider(f"dir:{tmp_path}"), DirectoryFfmProvider)
    with pytest.raises(ValueError):
        make_provider("nope")


# --- view picking and conflicts -------------------------------------------------

def test_pick_view_only_cur_sees():
    prev = make_frame(0, Pose(np.array([1.0, 0, 0, 0]), np.array([100.0, 0, 0])), 1)
    cur = make_frame(5, Pose.identity(), 1)
    view, pixel, depth = pick_view(np.array([0.0, 0, 3.0]), prev, cur, CAM)
    assert view == VIEW_CUR
    assert np.allclose(pixel, [32, 32])
    assert np.isclose(depth, 3.0)


def test_pick_view_closer_view_wins():
    prev = make_frame(0, Pose.identity(), 1)
    cur = make_frame(5, Pose(np.array([1.0, 0, 0, 0]), np.array([0, 0, -5.0])), 1)
    # point at z=4 from prev, z=9 from cur -> prev closer
    view, _, depth = pick_view(np.array([0.0, 0, 4.0]), prev, cur, CAM)
    assert view == VIEW_PREV and np.isclose(depth, 4.0)


def test_pick_view_behind_both():
    prev = make_frame(0, Pose.identity(), 1)
    cur = make_frame(5, Pose.identity(), 1)
    view, pixel, depth = pick_view(np.array([0.0, 0, -1.0]), prev, cur, CAM)
    assert view is None and pixel is None and depth is None


def test_resolve_conflicts_min_depth_survives():
    choice = np.array([VIEW_CUR, VIEW_CUR])
    pixels = np.array([[10.2, 10.4], [10.3, 10.1]])
    depths = np.array([3.0, 2.0])
    survivor = resolve_pixel_conflicts(choice, pixels, depths)
    assert survivor.tolist() == [False, True]


def test_resolve_conflicts_distinct_pixels_both_survive():
    choice = np.array([VIEW_CUR, VIEW_CUR])
    survivor = resolve_pixel_conflicts(choice, np.array([[3.0, 3.0], [9.0, 9.0]]),
                                       np.array([1.0, 1.0]))
    assert survivor.all()


def test_resolve_conflicts_tie_keeps_lower_index():
    choice = np.array([VIEW_PREV, VIEW_PREV])
    survivor = resolve_pixel_conflicts(choice, np.array([[5.0, 5.0], [5.0, 5.0]]),
                                       np.array([2.0, 2.0]))
    assert survivor.tolist() == [True, False]


def test_resolve_conflicts_different_views_not_in_conflict():
    choice = np.array([VIEW_PREV, VIEW_CUR])
    survivor = resolve_pixel_conflicts(choice, np.array([[5.0, 5.0], [5.0, 5.0]]),
                                       np.array([2.0, 3.0]))
    assert survivor.all()


# --- model attribute sampling ------------------------------------------------

def uniform_maps(h=8, w=8, a=(1.0, 1.0, 1.0), valid=None):
    maps = AttributeMaps(
        rotation=np.zeros((h, w, 4), dtype=np.float32),
        scale_shape=np.empty((h, w, 3), dtype=np.float32),
        opacity_logit=np.full((h, w), 0.5, dtype=np.float32),
        sh=np.zeros((h, w, 4, 3), dtype=np.float32),
        valid=np.ones((h, w), dtype=bool) if valid is None else valid,
    )
    maps.rotation[..., 0] = 1.0
    maps.scale_shape[:] = np.asarray(a, dtype=np.float32)
    return maps


def test_sample_model_attrs_unit_shape():
    out = sample_model_attrs(uniform_maps(), np.array([3.5, 3.5]), Pose.identity(),
                             d=10.0, f=500.0)
    assert np.allclose(out.log_scale, np.log(0.02), atol=1e-9)


def test_sample_model_attrs_shape_normalization():
    out = sample_model_attrs(uniform_maps(a=(2.0, 2.0, 0.5)), np.array([3.5, 3.5]),
                             Pose.identity(), d=10.0, f=500.0)
    gm = (2.0 * 2.0 * 0.5) ** (1 / 3)
    expected = 10.0 / 500.0 * np.array([2.0, 2.0, 0.5]) / gm
    assert np.allclose(np.exp(out.log_scale), expected, atol=1e-6)


def test_sample_model_attrs_scale_anchoring_property():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a = rng.uniform(0.2, 3.0, size=3)
        d, f = rng.uniform(1, 30), rng.uniform(100, 800)
        out = sample_model_attrs(uniform_maps(a=tuple(a)), np.array([3.2, 4.7]),
                                 Pose.identity(), d=d, f=f)
        gm = np.exp(np.mean(out.log_scale))
        assert np.isclose(gm, d / f, rtol=1e-9)


def test_sample_model_attrs_all_invalid():
    maps = uniform_maps(valid=np.zeros((8, 8), dtype=bool))
    assert sample_model_attrs(maps, np.array([3.5, 3.5]), Pose.identity(), 5.0, 100.0) is None


def test_sample_model_attrs_partial_validity_renormalizes():
    valid = np.ones((8, 8), dtype=bool)
    valid[3, 3] = False  # one of the 4 neighbors of (3.5, 3.5)
    maps = uniform_maps(valid=valid)
    out = sample_model_attrs(maps, np.array([3.5, 3.5]), Pose.identity(), 10.0, 500.0)
    assert np.allclose(out.log_scale, np.log(0.02), atol=1e-6)
    assert np.isclose(out.opacity_logit, 0.5, atol=1e-6)


def test_sample_model_attrs_world_rotation():
    rng = np.random.default_rng(5)
    pose = se3_exp(rng.normal(size=6))
    maps = uniform_maps()
    q_cam = np.array([np.cos(0.3), 0, 0, np.sin(0.3)], dtype=np.float32)
    maps.rotation[:] = q_cam
    out = sample_model_attrs(maps, np.array([3.5, 3.5]), pose, 5.0, 100.0)
    R_expected = pose.rotation_matrix() @ quat_to_matrix(q_cam.astype(np.float64))
    assert np.allclose(quat_to_matrix(out.rotation), R_expected, atol=1e-6)


# --- beta ----------------------------------------------------------------------

def test_compute_beta():
    assert compute_beta(100, 100, 0.2) == 1.0
    assert compute_beta(0, 100, 0.2) == 0.2
    assert np.isclose(compute_beta(30, 100, 0.2), 0.3)


def test_compute_beta_monotone():
    vals = [compute_beta(k, 50, 0.2) for k in range(51)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


# --- cascade ---------------------------------------------------------------------

def test_cascade_pca_branch_beta_one():
    s_pca = np.log([0.2, 0.1, 0.05])
    g = cascade_init(np.zeros(3), np.array([0.6, 0.5, 0.4]), np.array([1.0, 0, 0, 0]),
                     s_pca, True, None, beta=1.0, d=3.0, f=100.0, opacity0=0.1, n_bands=4)
    assert g.source is Source.PCA
    assert np.allclose(g.log_scale, s_pca)


def test_cascade_heuristic_isotropic():
    g = cascade_init(np.zeros(3), np.full(3, 0.5), np.array([1.0, 0, 0, 0]),
                     np.zeros(3), False, None, beta=0.5, d=5.0, f=500.0,
                     opacity0=0.1, n_bands=4)
    assert g.source is Source.HEURISTIC
    assert np.allclose(np.exp(g.log_scale), 0.01)
    assert np.isclose(1 / (1 + np.exp(-g.opacity_logit)), 0.1)


def test_cascade_dc_from_color():
    g = cascade_init(np.zeros(3), np.full(3, 0.5), np.array([1.0, 0, 0, 0]),
                     np.zeros(3), False, None, 1.0, 5.0, 500.0, 0.1, 4)
    assert np.allclose(g.sh[0], 0.0)
    g2 = cascade_init(np.zeros(3), np.array([1.0, 0.5, 0.0]), np.array([1.0, 0, 0, 0]),
                      np.zeros(3), False, None, 1.0, 5.0, 500.0, 0.1, 4)
    assert np.allclose(g2.sh[0], (np.array([1.0, 0.5, 0.0]) - 0.5) / SH_C0)


def test_cascade_model_branch_wholesale():
    attrs = ModelAttrs(rotation=np.array([0.0, 1.0, 0, 0]), log_scale=np.log([1, 2, 3.0]),
                       opacity_logit=0.7, sh_rest=np.full((3, 3), 0.25))
    g = cascade_init(np.ones(3), np.full(3, 0.5), np.array([1.0, 0, 0, 0]),
                     np.zeros(3), True, attrs, 1.0, 5.0, 500.0, 0.1, 4)
    assert g.source is Source.MODEL
    assert np.allclose(g.log_scale, np.log([1, 2, 3.0]))
    assert np.allclose(g.sh[1:], 0.25)


def test_cascade_beta_damps_pca_scale():
    s_pca = np.log([0.2, 0.1, 0.05])
    g = cascade_init(np.zeros(3), np.full(3, 0.5), np.array([1.0, 0, 0, 0]),
                     s_pca, True, None, beta=0.5, d=3.0, f=100.0, opacity0=0.1, n_bands=4)
    assert np.allclose(np.exp(g.log_scale), 0.5 * np.exp(s_pca))


# --- segment closing ---------------------------------------------------------------

class AllValidProvider:
    """Every pixel valid, unit shape, identity rotation."""

    def predict(self, prev_rgb, cur_rgb, prev_index=-1, cur_index=-1):
        h, w = prev_rgb.shape[:2]
        return uniform_maps(h, w), uniform_maps(h, w)


def grid_frame(index, pose, nu=10, nv=10, depth_val=4.0):
    us = np.linspace(4, CAM.width - 5, nu)
    vs = np.linspace(4, CAM.height - 5, nv)
    pts_cam = np.array([unproject(CAM, [u, v], depth_val) for u in us for v in vs])
    return make_frame(index, pose, positions=pose.apply(pts_cam))


def test_close_segment_one_gaussian_per_point():
    prev = grid_frame(0, Pose.identity())
    kfs = [grid_frame(5 * (i + 1), Pose(np.array([1.0, 0, 0, 0]), np.array([0, 0, 0.02 * i])),
                      nu=10, nv=10) for i in range(3)]
    seg = close_segment(kfs, prev, kfs[-1], CAM, AllValidProvider(),
                        InitConfig(), segment_id=1)
    assert len(seg.gaussians) <= 300
    assert np.all(seg.gaussians.segment_ids == 1)


def test_close_segment_all_model_valid():
    prev = grid_frame(0, Pose(np.array([1.0, 0, 0, 0]), np.array([200.0, 0, 0])))
    cur = grid_frame(5, Pose.identity(), nu=10, nv=10, depth_val=4.0)
    seg = close_segment([cur], prev, cur, CAM, AllValidProvider(), InitConfig(), 0)
    assert seg.source_counts == (100, 0, 0)


def test_close_segment_empty_raises():
    with pytest.raises(EmptySegment):
        close_segment([], grid_frame(0, Pose.identity()), grid_frame(5, Pose.identity()),
                      CAM, AllValidProvider(), InitConfig(), 0)


def test_close_segment_textureless_share():
    # left 40% of the image has zero contrast: those points miss the model
    # branch and land in pca/heuristic
    rng = np.random.default_rng(11)
    rgb = rng.uniform(0, 1, size=(CAM.height, CAM.width, 3))
    split = int(0.4 * CAM.width)
    rgb[:, :split] = 0.5
    us = np.arange(2, CAM.width - 2, dtype=float)
    vs = np.arange(2, CAM.height - 2, dtype=float)
    pts_cam = np.array([unproject(CAM, [u, v], 4.0) for v in vs for u in us])
    frame = make_frame(0, Pose.identity(), positions=pts_cam, rgb=rgb)
    far = make_frame(-1, Pose(np.array([1.0, 0, 0, 0]), np.array([500.0, 0, 0])), 1, rgb=rgb)
    seg = close_segment([frame], far, frame, CAM, StubFfmProvider(), InitConfig(), 0)
    share = (seg.source_counts[1] + seg.source_counts[2]) / len(seg.gaussians)
    assert abs(share - 0.4) < 0.1


def test_cascade_exclusivity_property():
    rng = np.random.default_rng(13)
    rgb = rng.uniform(0, 1, size=(CAM.height, CAM.width, 3))
    rgb[:, : CAM.width // 2] = 0.25
    positions = Pose.identity().apply(np.column_stack([
        rng.uniform(-1.5, 1.5, 200), rng.uniform(-1.5, 1.5, 200), rng.uniform(2, 6, 200)]))
    frame = make_frame(0, Pose.identity(), positions=positions, rgb=rgb,
                       reliable=rng.random(200) < 0.5)
    far = make_frame(-1, Pose(np.array([1.0, 0, 0, 0]), np.array([500.0, 0, 0])), 1, rgb=rgb)
    seg = close_segment([frame], far, frame, CAM, StubFfmProvider(), InitConfig(), 0)
    assert sum(seg.source_counts) == len(seg.gaussians)
    # pca-branch gaussians must have had a reliable prior
    n_pca = seg.source_counts[1]
    assert n_pca <= int(frame.prior_reliable.sum())
