"""End-to-end orchestration: frame ingest with voxel-PCA priors, segment
initialization, asynchronous map optimization, Gaussian loop closure with
pose-graph correction, evaluation, and run reports.

Two execution modes share the same components:
  deterministic - single thread, fixed interleave, seeded RNG, byte-stable
                  report.json (wall-clock numbers go to timings.json only);
  streaming     - producer / optimizer / loop workers over bounded queues,
                  real-time factor reported from wall clock.
"""

from __future__ import annotations

import json
import queue
import resource
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, config_to_dict, make_voxel_map
from .ffm import make_provider
from .gauss_init import Frame, Segment, close_segment, select_keyframe, select_loopframe
from .geom import Camera, Pose, save_trajectory_tsv, umeyama_align
from .loop_graph import (
    registration_stable,
    EmptyTarget,
    LoopConfig,
    NoCorrespondences,
    PoseGraph,
    accept_loop,
    extract_target_set,
    find_candidates,
    gaussian_gicp,
    optimize_pose_graph,
    propagate_correction,
    save_pose_graph,
)
from .losses import masked_ssim
from .map_opt import GlobalMap, SegmentRecord, View, save_map_ply
from .primitives import GaussianCloud, Source, num_sh_bands
from .render import render
from .synth import Dataset
from .voxel_pca import PointCloud


def psnr(img: np.ndarray, ref: np.ndarray, cap: float = 99.0) -> float:
    mse = float(np.mean((np.asarray(img) - np.asarray(ref)) ** 2))
    if mse <= 0:
        return cap
    return min(cap, float(10.0 * np.log10(1.0 / mse)))


def full_image_ssim(img: np.ndarray, ref: np.ndarray) -> float:
    mask = np.ones(img.shape[:2], dtype=bool)
    return float(np.mean([masked_ssim(img[..., c], ref[..., c], mask) for c in range(3)]))


@dataclass
class FrameRecord:
    index: int
    est_pose: Pose  # correction at creation already applied
    segment_id: int  # segment the frame belongs to (possibly still open)
    epoch: int  # corrections seen at creation


@dataclass
class LoopEvent:
    ordinal: int  # loopframe / segment ordinal
    frame_index: int
    est_pose: Pose
    odom_pose: Pose


@dataclass
class SegmentMsg:
    segment: Segment
    views: list
    event: LoopEvent
    epoch: int


@dataclass
class CorrectionTxn:
    old_nodes: list
    new_nodes: list
    info: dict
    applied: threading.Event = field(default_factory=threading.Event)


@dataclass
class MapSnapshot:
    cloud: GaussianCloud
    view_poses: list  # (frame_index, Pose)


class FrontEnd:
    """Ingests frames: voxel-PCA priors, keyframe/loopframe selection,
    segment closing. Applies the latest loop correction to incoming odometry."""

    def __init__(self, dataset: Dataset, cfg: Config, provider):
        self.dataset = dataset
        self.cfg = cfg
        self.provider = provider
        self.cam = dataset.camera
        self.voxel_map = make_voxel_map(cfg.voxel)
        self.correction = Pose.identity()
        self.epoch = 0
        self._lock = threading.Lock()
        self.keyframes: list = []
        self.prev_loopframe: Frame | None = None
        self.last_lf_pose: Pose | None = None
        self.next_segment_id = 0
        self.records: list = []

    def is_test_frame(self, k: int) -> bool:
        n = self.cfg.pipeline.holdout_every
        return n > 0 and k % n == n - 1

    def apply_correction(self, delta_last: Pose) -> None:
        with self._lock:
            self.correction = delta_last.compose(self.correction)
            self.epoch += 1

    def ingest(self, k: int) -> SegmentMsg | None:
        with self._lock:
            correction = self.correction.copy()
            epoch = self.epoch
        est = correction.compose(self.dataset.poses_odom[k])
        msg = None
        # every frame feeds the voxel map (priors mature fast); only
        # keyframes spawn Gaussians
        points = self.dataset.points(k)
        cloud = PointCloud(correction.apply(points.positions), points.colors,
                           points.covariances)
        self.voxel_map.insert(cloud, frame_index=k)
        if select_keyframe(k, self.cfg.init.keyframe_gap):
            frame = Frame(index=k, pose=est, rgb=self.dataset.rgb(k),
                          depth=self.dataset.depth(k), points=cloud)
            frame.attach_priors(self.voxel_map.priors_for(cloud.positions))
            first = self.prev_loopframe is None
            if first or select_loopframe(est, self.last_lf_pose,
                                         self.cfg.init.loop_trans_thresh,
                                         self.cfg.init.loop_rot_thresh):
                prev = self.prev_loopframe if self.prev_loopframe is not None else frame
                kfs = self.keyframes + [frame]
                seg = close_segment(kfs, prev, frame, self.cam, self.provider,
                                    self.cfg.init, self.next_segment_id)
                views = [View(f.index, f.pose.copy(), f.rgb, f.depth, seg.id, self.cam)
                         for f in kfs if not self.is_test_frame(f.index)]
                event = LoopEvent(ordinal=seg.id, frame_index=k, est_pose=est.copy(),
                                  odom_pose=self.dataset.poses_odom[k].copy())
                msg = SegmentMsg(segment=seg, views=views, event=event, epoch=epoch)
                self.prev_loopframe = frame
                self.last_lf_pose = est
                self.keyframes = []
                self.next_segment_id += 1
            else:
                self.keyframes.append(frame)
        seg_id = msg.segment.id if msg is not None else self.next_segment_id
        self.records.append(FrameRecord(index=k, est_pose=est, segment_id=seg_id,
                                        epoch=epoch))
        return msg


class Optimizer:
    """Owns the global map: insertions, corrections, steps, pruning."""

    def __init__(self, cfg: Config, cam: Camera):
        self.cfg = cfg
        self.cam = cam
        self.map = GlobalMap(cfg.map, num_sh_bands(cfg.init.sh_order))
        self.rng = np.random.default_rng(cfg.pipeline.seed)
        self.deltas: list = []  # last-node correction per applied txn
        self.total_steps = 0
        self.loss_log: list = []
        self.supervised_frames: set = set()
        self.pruned_total = 0

    def insert(self, msg: SegmentMsg) -> int:
        seg = msg.segment
        missed = self.deltas[msg.epoch:]
        fold = Pose.identity()
        for d in missed:
            fold = d.compose(fold)
        if missed:
            from .geom import quat_multiply

            seg.gaussians.means = fold.apply(seg.gaussians.means)
            seg.gaussians.rotations = quat_multiply(fold.q, seg.gaussians.rotations)
            seg.anchor_pose = fold.compose(seg.anchor_pose)
            for v in msg.views:
                v.pose = fold.compose(v.pose)
        inserted = self.map.insert_segment(seg)
        if missed:
            self.map.records[-1].correction = fold
        for v in msg.views:
            self.map.commit_view(v)
        self.map.apply_freeze_policy()
        return inserted

    def apply_txn(self, txn: CorrectionTxn) -> None:
        deltas = propagate_correction(self.map, txn.old_nodes, txn.new_nodes)
        self.deltas.append(deltas[-1])
        txn.applied.set()

    def snapshot(self, live: bool = False) -> MapSnapshot:
        cloud = self.map.cloud if live else self.map.cloud.copy()
        poses = [(v.frame_index, v.pose if live else v.pose.copy())
                 for v in self.map.views]
        return MapSnapshot(cloud=cloud, view_poses=poses)

    def budget_left(self) -> bool:
        budget = self.cfg.pipeline.total_step_budget
        return budget < 0 or self.total_steps < budget

    def run_steps(self, n: int) -> None:
        for _ in range(n):
            if not self.budget_left() or not self.map.views or len(self.map) == 0:
                return
            views = self.map.sample_views(self.rng)
            self.supervised_frames.update(v.frame_index for v in views)
            rec = self.map.optimize_step(views, self.cfg.loss, self.cfg.render)
            self.total_steps += 1
            self.loss_log.append(rec["total"] if rec["views"] else None)
            if self.cfg.map.prune_every > 0 and \
                    self.map.step_count % self.cfg.map.prune_every == 0 and \
                    self.map.step_count > 0:
                self.pruned_total += self.map.prune()


class LoopCloser:
    """Loopframe registry, candidate gating, GICP, pose-graph solving."""

    def __init__(self, cfg: LoopConfig, cam: Camera):
        self.cfg = cfg
        self.cam = cam
        self.node_est: list = []
        self.node_odom: list = []
        self.node_frames: list = []
        self.loop_edges: list = []  # (j, i, Z, info)
        self.accepted: list = []
        self.attempts = 0
        self.retracted: list = []
        self.pending_refine: tuple | None = None  # (i, j) of the last accept

    def build_graph(self) -> PoseGraph:
        graph = PoseGraph()
        for p in self.node_est:
            graph.add_node(p)
        for k in range(len(self.node_odom) - 1):
            z = self.node_odom[k].inverse().compose(self.node_odom[k + 1])
            graph.add_edge(k, k + 1, z, self.cfg.info_odom * np.eye(6))
        for (j, i, z, info) in self.loop_edges:
            graph.add_edge(j, i, z, info, kind="loop")
        return graph

    def on_loopframe(self, event: LoopEvent, snapshot: MapSnapshot | None,
                     ) -> CorrectionTxn | None:
        self.node_est.append(event.est_pose.copy())
        self.node_odom.append(event.odom_pose.copy())
        self.node_frames.append(event.frame_index)
        i = event.ordinal
        if snapshot is None or i == 0:
            return None
        candidates = find_candidates(self.node_est, i, self.cfg.r_search,
                                     self.cfg.min_gap)
        if not candidates:
            return None
        cloud = snapshot.cloud
        src_sel = cloud.segment_ids == i
        if int(src_sel.sum()) < self.cfg.n_min:
            return None
        src = cloud.subset(src_sel)
        # exclude every segment too recent to be independent of the current
        # one (mirrors the candidate gating): at a revisit, the immediately
        # preceding segments overlap the target region with the same drift
        # and would drag the registration toward identity
        exclude = set(range(max(0, i - self.cfg.min_gap) + 1, i + 1))
        for cand in candidates[: self.cfg.max_candidates]:
            self.attempts += 1
            j = cand.hist_index
            target_frame = self.node_frames[j]
            order = np.argsort([abs(fi - target_frame) for fi, _ in snapshot.view_poses],
                               kind="stable")
            query = [snapshot.view_poses[q][1] for q in order[: self.cfg.k_neighbors]]
            try:
                tar_idx = extract_target_set(cloud.means, cloud.segment_ids, query,
                                             self.cam, self.cfg.d_max, exclude)
            except EmptyTarget:
                continue
            if len(tar_idx) < self.cfg.n_min:
                continue
            tar = cloud.subset(tar_idx)
            reg_src, reg_tar = src, tar
            if self.cfg.prefer_pca_sources:
                # PCA-born Gaussians carry surface-true minor axes; the
                # planar-regularized metric is only meaningful with them, so
                # skip the candidate rather than register on mixed normals
                reg_src = src.subset(src.source == int(Source.PCA))
                reg_tar = tar.subset(tar.source == int(Source.PCA))
                if len(reg_src) < self.cfg.n_min or len(reg_tar) < self.cfg.n_min:
                    continue
            try:
                result = gaussian_gicp(reg_src, reg_tar, cand.guess, self.cfg)
            except NoCorrespondences:
                continue
            if not accept_loop(result, self.cfg.eps_res, self.cfg.n_min):
                continue
            if not registration_stable(reg_src, reg_tar, result, self.cfg):
                continue
            t_loop = result.transform
            z = self.node_est[j].inverse().compose(t_loop.compose(self.node_est[i]))
            self.loop_edges.append((j, i, z, self.cfg.info_loop * np.eye(6)))
            graph = self.build_graph()
            new_nodes, costs = optimize_pose_graph(graph)
            txn = CorrectionTxn(
                old_nodes=[p.copy() for p in self.node_est],
                new_nodes=[p.copy() for p in new_nodes],
                info={"cur": i, "hist": j,
                      "frame_cur": self.node_frames[i],
                      "frame_hist": self.node_frames[j],
                      "residual": result.residual,
                      "iterations": result.iterations,
                      "correspondences": result.n_correspondences,
                      "graph_cost_initial": costs[0], "graph_cost_final": costs[-1],
                      "t_loop": _pose_list(t_loop), "edge": _pose_list(z)})
            self.node_est = [p.copy() for p in new_nodes]
            self.accepted.append(txn.info)
            self.pending_refine = (i, j)
            return txn
        return None

    def _register_pair(self, i: int, j: int, snapshot: MapSnapshot, guess: Pose):
        """Extract sets for the (i, j) pair and run gated registration."""
        cloud = snapshot.cloud
        src = cloud.subset(cloud.segment_ids == i)
        exclude = set(range(max(0, i - self.cfg.min_gap) + 1, i + 1))
        target_frame = self.node_frames[j]
        order = np.argsort([abs(fi - target_frame) for fi, _ in snapshot.view_poses],
                           kind="stable")
        query = [snapshot.view_poses[q][1] for q in order[: self.cfg.k_neighbors]]
        tar_idx = extract_target_set(cloud.means, cloud.segment_ids, query,
                                     self.cam, self.cfg.d_max, exclude)
        tar = cloud.subset(tar_idx)
        reg_src, reg_tar = src, tar
        if self.cfg.prefer_pca_sources:
            reg_src = src.subset(src.source == int(Source.PCA))
            reg_tar = tar.subset(tar.source == int(Source.PCA))
            if len(reg_src) < self.cfg.n_min or len(reg_tar) < self.cfg.n_min:
                return None
        result = gaussian_gicp(reg_src, reg_tar, guess, self.cfg)
        if not accept_loop(result, self.cfg.eps_res, self.cfg.n_min):
            return None
        if not registration_stable(reg_src, reg_tar, result, self.cfg):
            return None
        return result

    def refine_last(self, snapshot: MapSnapshot) -> CorrectionTxn | None:
        """Re-register the last accepted pair on the corrected map.

        On success the stored edge is replaced by the re-measured one (the
        straightened target patch carries less drift warp). A pair that
        cannot be re-confirmed is retracted: its edge leaves the graph and
        the correction is re-solved without it.
        """
        if self.pending_refine is None:
            return None
        i, j = self.pending_refine
        self.pending_refine = None
        try:
            result = self._register_pair(i, j, snapshot, Pose.identity())
        except (EmptyTarget, NoCorrespondences):
            result = None
        if result is None:
            self.loop_edges.pop()
            self.retracted.append(self.accepted.pop())
            info = {"cur": i, "hist": j, "retracted": True}
        else:
            z = self.node_est[j].inverse().compose(
                result.transform.compose(self.node_est[i]))
            self.loop_edges[-1] = (j, i, z, self.cfg.info_loop * np.eye(6))
            info = {"cur": i, "hist": j,
                    "frame_cur": self.node_frames[i],
                    "frame_hist": self.node_frames[j],
                    "residual": result.residual, "iterations": result.iterations,
                    "correspondences": result.n_correspondences,
                    "t_loop": _pose_list(result.transform), "edge": _pose_list(z),
                    "refined": True}
        graph = self.build_graph()
        new_nodes, costs = optimize_pose_graph(graph)
        info["graph_cost_initial"] = costs[0]
        info["graph_cost_final"] = costs[-1]
        txn = CorrectionTxn(old_nodes=[p.copy() for p in self.node_est],
                            new_nodes=[p.copy() for p in new_nodes], info=info)
        self.node_est = [p.copy() for p in new_nodes]
        if result is not None:
            self.accepted[-1] = txn.info
        return txn


def _pose_list(p: Pose) -> list:
    return [float(x) for x in np.concatenate([p.t, p.q])]


# ---------------------------------------------------------------------------
# run modes
# ---------------------------------------------------------------------------

class _Timers:
    def __init__(self):
        self.buckets = {}

    def add(self, name: str, dt: float) -> None:
        self.buckets[name] = self.buckets.get(name, 0.0) + dt


def run(dataset_dir, cfg: Config, mode: str = "deterministic",
        loop_enabled: bool | None = None, out_dir=None) -> dict:
    """Full mapping run over a dataset directory; writes report, trajectories,
    map checkpoint, and pose-graph dump into out_dir (if given)."""
    dataset = Dataset(dataset_dir)
    if loop_enabled is None:
        loop_enabled = cfg.pipeline.loop_enabled
    provider = make_provider(cfg.ffm.provider, cfg.ffm.contrast_threshold,
                             cfg.init.sh_order)
    front = FrontEnd(dataset, cfg, provider)
    optimizer = Optimizer(cfg, dataset.camera)
    closer = LoopCloser(cfg.loop, dataset.camera)
    timers = _Timers()
    t_start = time.perf_counter()

    if mode == "deterministic":
        _run_deterministic(dataset, cfg, front, optimizer, closer, loop_enabled, timers)
    elif mode == "streaming":
        _run_streaming(dataset, cfg, front, optimizer, closer, loop_enabled, timers)
    else:
        raise ValueError(f"unknown mode: {mode!r}")
    wall = time.perf_counter() - t_start

    report, timings = _finalize(dataset, cfg, mode, loop_enabled, front, optimizer,
                                closer, timers, wall, out_dir)
    return report


def _run_deterministic(dataset, cfg, front, optimizer, closer, loop_enabled, timers):
    s = cfg.pipeline.steps_per_frame
    for k in range(len(dataset)):
        t0 = time.perf_counter()
        msg = front.ingest(k)
        timers.add("front_end", time.perf_counter() - t0)
        if msg is not None:
            t0 = time.perf_counter()
            optimizer.insert(msg)
            timers.add("optimizer", time.perf_counter() - t0)
            if loop_enabled:
                t0 = time.perf_counter()
                txn = closer.on_loopframe(msg.event, optimizer.snapshot(live=True))
                timers.add("loop", time.perf_counter() - t0)
                if txn is not None:
                    optimizer.apply_txn(txn)
                    front.apply_correction(optimizer.deltas[-1])
                    t0 = time.perf_counter()
                    txn2 = closer.refine_last(optimizer.snapshot(live=True))
                    timers.add("loop", time.perf_counter() - t0)
                    if txn2 is not None:
                        optimizer.apply_txn(txn2)
                        front.apply_correction(optimizer.deltas[-1])
            else:
                closer.on_loopframe(msg.event, None)
        t0 = time.perf_counter()
        optimizer.run_steps(s)
        timers.add("optimizer", time.perf_counter() - t0)


def _run_streaming(dataset, cfg, front, optimizer, closer, loop_enabled, timers):
    q_seg = queue.Queue(maxsize=cfg.pipeline.queue_depth)
    q_loop = queue.Queue()
    q_snap_req = queue.Queue()
    q_snap = queue.Queue()
    q_corr = queue.Queue()
    producer_done = threading.Event()
    loop_done = threading.Event()
    errors = []

    def producer():
        try:
            interval = 1.0 / dataset.meta["rate"]
            start = time.perf_counter()
            for k in range(len(dataset)):
                if cfg.pipeline.streaming_pace == "realtime":
                    lag = start + k * interval - time.perf_counter()
                    if lag > 0:
                        time.sleep(lag)
                t0 = time.perf_counter()
                msg = front.ingest(k)
                timers.add("front_end", time.perf_counter() - t0)
                if msg is not None:
                    q_seg.put(msg)  # blocks when the optimizer lags
                    if loop_enabled:
                        q_loop.put(msg.event)
                    else:
                        closer.on_loopframe(msg.event, None)
        except Exception as exc:  # surfaced by the main thread
            errors.append(("front_end", exc))
        finally:
            producer_done.set()
            q_loop.put(None)

    def loop_worker():
        try:
            while True:
                event = q_loop.get()
                if event is None:
                    break
                q_snap_req.put(True)
                snapshot = q_snap.get()
                t0 = time.perf_counter()
                txn = closer.on_loopframe(event, snapshot)
                timers.add("loop", time.perf_counter() - t0)
                if txn is not None:
                    q_corr.put(txn)
                    txn.applied.wait()  # refinement must see the corrected map
                    q_snap_req.put(True)
                    snapshot = q_snap.get()
                    t0 = time.perf_counter()
                    txn2 = closer.refine_last(snapshot)
                    timers.add("loop", time.perf_counter() - t0)
                    if txn2 is not None:
                        q_corr.put(txn2)
        except Exception as exc:
            errors.append(("loop_graph", exc))
        finally:
            loop_done.set()

    def optimizer_worker():
        try:
            while True:
                while not q_corr.empty():
                    t0 = time.perf_counter()
                    txn = q_corr.get()
                    optimizer.apply_txn(txn)
                    front.apply_correction(optimizer.deltas[-1])
                    timers.add("optimizer", time.perf_counter() - t0)
                while not q_snap_req.empty():
                    q_snap_req.get()
                    q_snap.put(optimizer.snapshot(live=False))
                try:
                    msg = q_seg.get(timeout=0.002)
                    t0 = time.perf_counter()
                    optimizer.insert(msg)
                    timers.add("optimizer", time.perf_counter() - t0)
                    continue
                except queue.Empty:
                    pass
                if producer_done.is_set() and loop_done.is_set() and q_seg.empty() \
                        and q_corr.empty() and q_snap_req.empty():
                    break
                t0 = time.perf_counter()
                optimizer.run_steps(1)
                timers.add("optimizer", time.perf_counter() - t0)
        except Exception as exc:
            errors.append(("map_opt", exc))

    threads = [threading.Thread(target=producer, name="producer"),
               threading.Thread(target=loop_worker, name="loop"),
               threading.Thread(target=optimizer_worker, name="optimizer")]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        module, exc = errors[0]
        raise RuntimeError(f"[{module}] worker failed: {exc}") from exc


# ---------------------------------------------------------------------------
# evaluation and reporting
# ---------------------------------------------------------------------------

def evaluate_views(cloud: GaussianCloud, cam: Camera, eval_views: list,
                   render_cfg) -> dict:
    """PSNR (full image, capped 99 dB) and SSIM per held-out view."""
    per_view = []
    for frame_index, pose, gt_rgb in eval_views:
        out = render(cloud, cam, pose, render_cfg)
        per_view.append({"frame": int(frame_index),
                         "psnr": psnr(out.color, gt_rgb),
                         "ssim": full_image_ssim(out.color, gt_rgb)})
    if not per_view:
        return {"per_view": [], "psnr_mean": None, "ssim_mean": None}
    return {"per_view": per_view,
            "psnr_mean": float(np.mean([v["psnr"] for v in per_view])),
            "ssim_mean": float(np.mean([v["ssim"] for v in per_view]))}


def assemble_trajectory(front: FrontEnd, optimizer: Optimizer) -> list:
    """Final per-frame poses: segment corrections applied over creation poses."""
    corr_by_seg = {rec.id: rec.correction for rec in optimizer.map.records}
    out = []
    for fr in front.records:
        if fr.segment_id in corr_by_seg:
            corr = corr_by_seg[fr.segment_id]
        else:
            corr = Pose.identity()
            for d in optimizer.deltas[fr.epoch:]:
                corr = d.compose(corr)
        out.append(corr.compose(fr.est_pose))
    return out


def _finalize(dataset, cfg, mode, loop_enabled, front, optimizer, closer, timers,
              wall, out_dir):
    est = assemble_trajectory(front, optimizer)
    gt = dataset.poses_gt
    _, ate = umeyama_align(est, gt)
    _, ate_odom = umeyama_align(dataset.poses_odom, gt)

    test_frames = [k for k in range(len(dataset)) if front.is_test_frame(k)]
    eval_views = [(k, est[k], dataset.rgb(k)) for k in test_frames]
    t0 = time.perf_counter()
    eval_result = evaluate_views(optimizer.map.cloud, dataset.camera, eval_views,
                                 cfg.render)
    timers.add("eval", time.perf_counter() - t0)

    src_counts = [int(np.sum(optimizer.map.cloud.source == s))
                  for s in (Source.MODEL, Source.PCA, Source.HEURISTIC)]
    stream_duration = dataset.meta["stream_duration"]
    report = {
        "mode": mode,
        "n_frames": len(dataset),
        "ate_rmse": ate,
        "ate_rmse_odom": ate_odom,
        "loop": {
            "enabled": loop_enabled,
            "loopframes": len(closer.node_est),
            "attempts": closer.attempts,
            "accepted": closer.accepted,
        },
        "map": {
            "n_gaussians": len(optimizer.map.cloud),
            "n_segments": len(optimizer.map.records),
            "source_counts": {"model": src_counts[0], "pca": src_counts[1],
                              "heuristic": src_counts[2]},
            "pruned": optimizer.pruned_total,
        },
        "optimization": {
            "total_steps": optimizer.total_steps,
            "first_loss": optimizer.loss_log[0] if optimizer.loss_log else None,
            "last_loss": optimizer.loss_log[-1] if optimizer.loss_log else None,
        },
        "eval": eval_result,
        "holdout": {
            "test_frames": test_frames,
            "supervised_frames": sorted(optimizer.supervised_frames),
        },
        # wall-clock factors only in streaming mode: deterministic reports
        # must be byte-identical across runs
        "real_time_factor": round(wall / stream_duration, 2)
        if mode == "streaming" else None,
        "real_time_factor_optimizer": round(timers.buckets.get("optimizer", 0.0)
                                            / stream_duration, 2)
        if mode == "streaming" else None,
    }
    timings = {
        "wall_seconds": wall,
        "stream_duration": stream_duration,
        "real_time_factor": wall / stream_duration,
        "real_time_factor_optimizer": timers.buckets.get("optimizer", 0.0)
        / stream_duration,
        "per_module_seconds": timers.buckets,
        "peak_rss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
    }

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
        with open(out / "timings.json", "w") as f:
            json.dump(timings, f, indent=1, sort_keys=True)
        save_trajectory_tsv(out / "trajectory.tsv", dataset.timestamps, est)
        save_map_ply(out / "map.ply", optimizer.map.cloud, optimizer.map.records,
                     config=config_to_dict(cfg), camera=dataset.camera)
        save_pose_graph(out / "pose_graph.txt", closer.build_graph())
    return report, timings
