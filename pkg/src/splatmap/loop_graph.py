"""Loop closure on the Gaussian map: metric candidate gating, frustum
target-set extraction, planar covariance regularization, Gaussian GICP
registration, SE(3) pose-graph optimization, and correction propagation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Camera, Pose, project_points, quat_multiply, se3_exp, se3_log, skew
from .spatial import HashGrid3D


class EmptyTarget(ValueError):
    """No map Gaussian satisfies the target-set predicate."""


class NoCorrespondences(ValueError):
    """No source Gaussian found a target neighbor within d_corr."""


class SingularSystem(np.linalg.LinAlgError):
    """Pose graph is under-constrained."""


@dataclass
class LoopConfig:
    r_search: float = 10.0  # m, candidate gating radius
    min_gap: int = 20  # loopframe-index separation
    d_max: float = 30.0  # m, target-set distance cut
    k_neighbors: int = 5  # query keyframes around the historical loopframe
    d_corr: float = 1.0  # m, correspondence rejection radius
    n_min: int = 50  # minimum correspondences for acceptance
    eps_t: float = 1e-6  # update-norm convergence threshold
    max_iters: int = 50
    max_step: float = 0.5  # trust-region cap on one update's twist norm;
    # planar covariances leave near-degenerate tangent directions and an
    # uncapped solve can jump out of the correspondence basin
    max_correction: float = float("inf")  # total twist norm vs the initial
    # guess beyond which the solve counts as diverged (not converged)
    eps_res: float = 0.5  # Mahalanobis residual acceptance threshold
    info_odom: float = 1.0
    info_loop: float = 10.0
    max_candidates: int = 3  # tried per loopframe, nearest first
    prefer_pca_sources: bool = True  # register on voxel-PCA-born Gaussians
    # (their minor axes are true surface normals) when both sets have enough
    stability_checks: int = 0  # extra GICP runs from perturbed inits; a
    # registration whose solutions scatter sits in a degenerate or aliased
    # basin and is rejected (0 disables the gate)
    stability_radius: float = 0.25  # m, lateral perturbation of the init
    stability_tol_t: float = 0.06  # m, max spread of the returned solutions
    stability_tol_r: float = float(np.deg2rad(1.0))


@dataclass
class LoopCandidate:
    cur_index: int  # loopframe ordinal of the current frame
    hist_index: int
    guess: Pose  # initial world correction for GICP (identity refinement)


@dataclass
class GicpResult:
    transform: Pose  # world correction aligning source onto target
    residual: float  # mean Mahalanobis distance over final correspondences
    iterations: int
    converged: bool
    n_correspondences: int


def find_candidates(loopframe_poses: list, cur: int, r_search: float,
                    min_gap: int) -> list:
    """Historical loopframes within r_search and at least min_gap older,
    nearest first."""
    cur_t = loopframe_poses[cur].t
    hits = []
    for j in range(cur):
        if cur - j < min_gap:
            continue
        d = float(np.linalg.norm(loopframe_poses[j].t - cur_t))
        if d < r_search:
            hits.append((d, j))
    hits.sort()
    return [LoopCandidate(cur_index=cur, hist_index=j, guess=Pose.identity())
            for _, j in hits]


def extract_target_set(means: np.ndarray, segment_ids: np.ndarray,
                       query_views: list, cam: Camera, d_max: float,
                       src_segment_ids) -> np.ndarray:
    """Indices of Gaussians seen by at least one query view.

    Retained iff there exists a view whose camera both images the center
    (in-image, positive depth) and lies within d_max of it, and the Gaussian
    does not belong to a source segment.
    """
    n = len(means)
    keep = np.zeros(n, dtype=bool)
    for pose in query_views:
        p_cam = pose.inverse().apply(means)
        _, _, inside = project_points(cam, p_cam)
        near = np.linalg.norm(means - pose.t, axis=1) < d_max
        keep |= inside & near
    keep &= ~np.isin(segment_ids, list(src_segment_ids))
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        raise EmptyTarget("no Gaussian inside the query frusta")
    return idx


def regularize_covariance(sigma: np.ndarray) -> np.ndarray:
    """Planar form: keep the eigenbasis, replace eigenvalues by (1, 1, 1e-3)
    with 1e-3 on the smallest-eigenvalue direction."""
    return regularize_covariances(sigma[None])[0]


def regularize_covariances(sigmas: np.ndarray) -> np.ndarray:
    _, vecs = np.linalg.eigh(sigmas)  # ascending: column 0 = smallest
    lam = np.array([1e-3, 1.0, 1.0])
    return np.einsum("nij,j,nkj->nik", vecs, lam, vecs)


def _batched_inverse_3x3(mats: np.ndarray) -> np.ndarray:
    return np.linalg.inv(mats)


def gaussian_gicp(src, tar, T_init: Pose, cfg: LoopConfig) -> GicpResult:
    """Registration between Gaussian sets under regularized covariances.

    Per iteration: nearest-neighbor correspondences within d_corr, residual
    r = mu_tar - T mu_src with covariance Sig_tar + R Sig_src R^T, then one
    damped Gauss-Newton step on SE(3). Accepted steps never increase the
    fixed-correspondence objective. Converges when the update norm drops
    below eps_t.
    """
    src_means = src.means
    tar_means = tar.means
    src_covs = regularize_covariances(src.covariances())
    tar_covs = regularize_covariances(tar.covariances())
    grid = HashGrid3D.build(tar_means, cfg.d_corr)

    T = T_init.copy()
    lam = 1e-6
    converged = False
    iterations = 0
    n_corr = 0
    for iterations in range(1, cfg.max_iters + 1):
        src_t = T.apply(src_means)
        nn = grid.nearest_within_batch(src_t, cfg.d_corr)
        m_idx = np.flatnonzero(nn >= 0)
        if len(m_idx) == 0:
            raise NoCorrespondences("no pair within d_corr")
        n_idx = nn[m_idx]
        n_corr = len(m_idx)

        R = T.rotation_matrix()
        sig = tar_covs[n_idx] + np.einsum("ij,njk,lk->nil", R, src_covs[m_idx], R)
        W = _batched_inverse_3x3(sig)
        p = src_t[m_idx]
        r = tar_means[n_idx] - p

        # J columns: rotation then translation of a left perturbation exp(d) T;
        # dr = [T mu]x dphi - drho
        J = np.zeros((n_corr, 3, 6))
        J[:, :, 3:] = -np.eye(3)
        J[:, 0, 1] = -p[:, 2]
        J[:, 0, 2] = p[:, 1]
        J[:, 1, 0] = p[:, 2]
        J[:, 1, 2] = -p[:, 0]
        J[:, 2, 0] = -p[:, 1]
        J[:, 2, 1] = p[:, 0]

        WJ = np.einsum("nij,njk->nik", W, J)
        H = np.einsum("nji,njk->ik", J, WJ)
        b = -np.einsum("nji,njk,nk->i", J, W, r)
        cost = float(np.einsum("ni,nij,nj->", r, W, r))

        accepted = False
        for _ in range(10):
            try:
                delta = np.linalg.solve(H + lam * np.eye(6), b)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            step = np.linalg.norm(delta)
            if step > cfg.max_step:
                delta = delta * (cfg.max_step / step)
            T_try = se3_exp(delta).compose(T)
            r_try = tar_means[n_idx] - T_try.apply(src_means[m_idx])
            cost_try = float(np.einsum("ni,nij,nj->", r_try, W, r_try))
            if cost_try <= cost:
                T = T_try
                lam = max(lam * 0.1, 1e-9)
                accepted = True
                break
            lam *= 10
        if not accepted:
            break
        if np.linalg.norm(se3_log(T.compose(T_init.inverse()))) > cfg.max_correction:
            break  # wandered out of the gated search region: diverged
        if np.linalg.norm(delta) < cfg.eps_t:
            converged = True
            break

    src_t = T.apply(src_means)
    nn = grid.nearest_within_batch(src_t, cfg.d_corr)
    m_idx = np.flatnonzero(nn >= 0)
    if len(m_idx) == 0:
        raise NoCorrespondences("no pair within d_corr at the final estimate")
    n_idx = nn[m_idx]
    R = T.rotation_matrix()
    sig = tar_covs[n_idx] + np.einsum("ij,njk,lk->nil", R, src_covs[m_idx], R)
    W = _batched_inverse_3x3(sig)
    r = tar_means[n_idx] - src_t[m_idx]
    mahal = np.sqrt(np.maximum(np.einsum("ni,nij,nj->n", r, W, r), 0.0))
    return GicpResult(transform=T, residual=float(mahal.mean()),
                      iterations=iterations, converged=converged,
                      n_correspondences=len(m_idx))


def accept_loop(result: GicpResult, eps_res: float, n_min: int) -> bool:
    return result.converged and result.residual < eps_res and result.n_correspondences >= n_min


def registration_stable(src, tar, base: GicpResult, cfg: LoopConfig) -> bool:
    """Basin-stability certificate: restart the registration from laterally
    perturbed initializations and demand consensus with the base solution.

    Degenerate (slide-prone) or aliased registrations scatter under
    perturbation; well-constrained ones return to the same pose.
    """
    if cfg.stability_checks <= 0:
        return True
    from .geom import pose_geodesic_angle  # local: avoids polluting module API

    for k in range(cfg.stability_checks):
        ang = 2.0 * np.pi * k / cfg.stability_checks
        offset = cfg.stability_radius * np.array([np.cos(ang), np.sin(ang), 0.0])
        init = Pose(base.transform.q, base.transform.t + offset)
        try:
            res = gaussian_gicp(src, tar, init, cfg)
        except NoCorrespondences:
            return False
        if not res.converged:
            return False
        if np.linalg.norm(res.transform.t - base.transform.t) > cfg.stability_tol_t:
            return False
        if pose_geodesic_angle(res.transform, base.transform) > cfg.stability_tol_r:
            return False
    return True


# ---------------------------------------------------------------------------
# pose graph
# ---------------------------------------------------------------------------

@dataclass
class PoseGraphEdge:
    i: int
    j: int
    measurement: Pose  # Z_ij, expected X_i^-1 X_j
    information: np.ndarray  # (6, 6) symmetric PD
    kind: str = "odometry"  # or "loop"


@dataclass
class PoseGraph:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    def add_node(self, pose: Pose) -> int:
        self.nodes.append(pose.copy())
        return len(self.nodes) - 1

    def add_edge(self, i: int, j: int, measurement: Pose, information: np.ndarray,
                 kind: str = "odometry") -> None:
        self.edges.append(PoseGraphEdge(i, j, measurement.copy(),
                                        np.asarray(information, dtype=np.float64),
                                        kind))


def _edge_residual(edge: PoseGraphEdge, nodes: list) -> np.ndarray:
    rel = nodes[edge.i].inverse().compose(nodes[edge.j])
    return se3_log(edge.measurement.inverse().compose(rel))


def graph_cost(graph: PoseGraph, nodes: list = None) -> float:
    nodes = graph.nodes if nodes is None else nodes
    total = 0.0
    for e in graph.edges:
        r = _edge_residual(e, nodes)
        total += float(r @ e.information @ r)
    return total


def _edge_jacobians(edge: PoseGraphEdge, nodes: list, h: float = 1e-7):
    """Numeric central-difference Jacobians of the edge residual w.r.t. the
    right perturbations of its two nodes."""
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        for J, which in ((Ji, edge.i), (Jj, edge.j)):
            saved = nodes[which]
            nodes[which] = saved.compose(se3_exp(d))
            rp = _edge_residual(edge, nodes)
            nodes[which] = saved.compose(se3_exp(-d))
            rm = _edge_residual(edge, nodes)
            nodes[which] = saved
            J[:, k] = (rp - rm) / (2 * h)
    return Ji, Jj


def optimize_pose_graph(graph: PoseGraph, max_iters: int = 50,
                        eps_update: float = 1e-10):
    """Levenberg-Marquardt over all nodes with node 0 gauge-fixed.

    Returns (corrected poses, list of accepted costs, monotone nonincreasing).
    """
    n = len(graph.nodes)
    if n < 2 or not graph.edges:
        return [p.copy() for p in graph.nodes], [graph_cost(graph)]
    nodes = [p.copy() for p in graph.nodes]
    dim = 6 * (n - 1)  # node 0 excluded
    lam = 1e-6
    costs = [graph_cost(graph, nodes)]
    for _ in range(max_iters):
        H = np.zeros((dim, dim))
        b = np.zeros(dim)
        for e in graph.edges:
            r = _edge_residual(e, nodes)
            Ji, Jj = _edge_jacobians(e, nodes)
            blocks = [(e.i, Ji), (e.j, Jj)]
            for a, Ja in blocks:
                if a == 0:
                    continue
                sa = slice(6 * (a - 1), 6 * a)
                b[sa] -= Ja.T @ e.information @ r
                for c, Jc in blocks:
                    if c == 0:
                        continue
                    sc = slice(6 * (c - 1), 6 * c)
                    H[sa, sc] += Ja.T @ e.information @ Jc
        accepted = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(H + lam * np.eye(dim), b)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = [nodes[0].copy()] + [
                nodes[k].compose(se3_exp(delta[6 * (k - 1): 6 * k])) for k in range(1, n)]
            cost_try = graph_cost(graph, trial)
            if cost_try <= costs[-1]:
                nodes = trial
                costs.append(cost_try)
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted:
            break
        if np.linalg.norm(delta) < eps_update:
            break
    if not np.all(np.isfinite([c for c in costs])):
        raise SingularSystem("pose graph optimization diverged")
    return nodes, costs


# ---------------------------------------------------------------------------
# correction propagation
# ---------------------------------------------------------------------------

def propagate_correction(global_map, old_node_poses: list, new_node_poses: list) -> list:
    """Apply per-node corrections dT = X_new X_old^-1 to each segment's
    Gaussians (means and rotations), its supervisory views, and its stored
    cumulative correction; the spatial index is rebuilt. Returns the dT list.
    """
    if len(old_node_poses) != len(new_node_poses) or \
            len(new_node_poses) != len(global_map.records):
        raise ValueError("node count must match segment count")
    deltas = []
    cloud = global_map.cloud
    for rec, old, new in zip(global_map.records, old_node_poses, new_node_poses):
        dT = new.compose(old.inverse())
        deltas.append(dT)
        members = cloud.segment_ids == rec.id
        if members.any():
            cloud.means[members] = dT.apply(cloud.means[members])
            cloud.rotations[members] = quat_multiply(dT.q, cloud.rotations[members])
        for view in global_map.views:
            if view.segment_id == rec.id:
                view.pose = dT.compose(view.pose)
        rec.correction = dT.compose(rec.correction)
    global_map.rebuild_index()
    return deltas


# ---------------------------------------------------------------------------
# pose-graph text format
# ---------------------------------------------------------------------------

def save_pose_graph(path, graph: PoseGraph) -> None:
    """NODE id tx ty tz qw qx qy qz; EDGE i j <rel pose> <21 upper-tri info>."""
    with open(path, "w") as f:
        for i, p in enumerate(graph.nodes):
            vals = list(p.t) + list(p.q)
            f.write(f"NODE {i} " + " ".join(repr(float(v)) for v in vals) + "\n")
        for e in graph.edges:
            vals = list(e.measurement.t) + list(e.measurement.q)
            iu = np.triu_indices(6)
            info = e.information[iu]
            f.write(f"EDGE {e.i} {e.j} "
                    + " ".join(repr(float(v)) for v in vals) + " "
                    + " ".join(repr(float(v)) for v in info) + "\n")


def load_pose_graph(path) -> PoseGraph:
    graph = PoseGraph()
    iu = np.triu_indices(6)
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "NODE":
                vals = [float(x) for x in parts[2:9]]
                graph.nodes.append(Pose(np.array(vals[3:7]), np.array(vals[0:3])))
            elif parts[0] == "EDGE":
                i, j = int(parts[1]), int(parts[2])
                vals = [float(x) for x in parts[3:10]]
                info_vals = [float(x) for x in parts[10:31]]
                info = np.zeros((6, 6))
                info[iu] = info_vals
                info = info + info.T - np.diag(np.diag(info))
                graph.add_edge(i, j, Pose(np.array(vals[3:7]), np.array(vals[0:3])), info)
    return graph
