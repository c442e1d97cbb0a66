"""Pipeline: one tracker task, one mapper task, a bounded keyframe queue.

The tracker estimates a pose per frame and never mutates the map; everything
that writes (keyframe insertion, triangulation, densification, BA, culling,
counter updates) funnels through the mapper. ``deterministic=True`` runs the
mapper inline after each frame, which makes whole runs bit-reproducible.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import densify as densify_mod
from . import mapping, relocate, tracking
from .config import Config
from .geometry import CameraModel, Pose, project_array
from .worldmap import Observation, WorldMap


@dataclass
class Timing:
    totals: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def add(self, key: str, seconds: float) -> None:
        self.totals[key] = self.totals.get(key, 0.0) + seconds
        self.counts[key] = self.counts.get(key, 0) + 1

    def mean_ms(self, key: str) -> float:
        c = self.counts.get(key, 0)
        return 1000.0 * self.totals.get(key, 0.0) / c if c else 0.0


@dataclass
class FrameResult:
    index: int
    timestamp: float
    status: str
    pose: Pose | None
    n_inliers: int = 0
    n_semidense: int = 0
    keyframe: bool = False
    relocalized: bool = False


class SlamSystem:
    def __init__(self, cam: CameraModel, cfg: Config, vocab=None, deterministic: bool = True,
                 densify: bool | None = None):
        self.cam = cam
        self.cfg = cfg
        self.map = WorldMap(cfg.features.scale_factor)
        self.state = tracking.TrackState()
        self.vocab = vocab
        self.db = relocate.KeyframeDatabase(vocab) if vocab is not None else None
        self.densify_enabled = cfg.densify.enabled if densify is None else densify
        self.deterministic = deterministic
        self.timing = Timing()
        self.trajectory: list = []          # (timestamp, Pose) of tracked frames
        self.results: list = []
        self.ba_outlier_fractions: list = []

        self._init_frame = None
        self._prev_frame = None
        self._prev_sd = None
        self._frames_since_kf = 0
        self._ref_kf = None
        self._n_frames = 0

        self._queue: queue.Queue = queue.Queue(maxsize=8)
        self._mapper_busy = False
        self._mapper_thread = None
        self._mapper_error = None
        self._mapper_seconds_this_frame = 0.0
        if not deterministic:
            self._mapper_thread = threading.Thread(target=self._mapper_loop, daemon=True)
            self._mapper_thread.start()

    # -- mapper side ------------------------------------------------------------

    def _mapper_loop(self):
        while True:
            item = self._queue.get()
            if item is None:
                return
            self._mapper_busy = True
            try:
                self._mapper_handle(item)
            except Exception as exc:  # surfaced on finish()
                self._mapper_error = exc
            finally:
                self._mapper_busy = False
                self._queue.task_done()

    def _dispatch(self, item):
        if self.deterministic:
            self._mapper_handle(item)
        else:
            try:
                self._queue.put_nowait(item)
            except queue.Full:
                pass  # mapper saturated; tracker simply drops the message

    def _mapper_idle(self) -> bool:
        if self.deterministic:
            # emulate the mapper's per-keyframe latency so the inline mode has
            # the same queue-idle gating the threaded mode gets for free
            return self._frames_since_kf >= self.cfg.mapping.mapper_latency_frames
        return self._queue.empty() and not self._mapper_busy

    def _mapper_handle(self, item):
        t_start = time.perf_counter()
        try:
            self._mapper_handle_inner(item)
        finally:
            self._mapper_seconds_this_frame += time.perf_counter() - t_start

    def _mapper_handle_inner(self, item):
        kind = item[0]
        if kind == "stats":
            _, visible, found = item
            self.map.bump_counters(visible, found)
            return
        _, frame, pose, match_pairs, sd_obs = item
        cfg = self.cfg
        kf = mapping.make_keyframe(frame, pose, frame.timestamp)
        kf_id = self.map.insert_keyframe(kf)
        for pid, kp_idx in match_pairs:
            if pid in self.map.points:
                self.map.add_observation(
                    pid, kf_id,
                    Observation(frame.kp_xy[kp_idx].copy(), int(frame.kp_levels[kp_idx]), int(kp_idx)),
                )
        for pid, (u, v) in sd_obs:
            mp = self.map.points.get(pid)
            if mp is None:
                continue
            self.map.add_observation(
                pid, kf_id, Observation(np.array([u, v]), mp.anchor_level, -1)
            )
            # bound the patch-observation fan-out: old patch views add little
            # to BA but grow its pair structure quadratically
            patch_kfs = sorted(
                k for k, ob in mp.observations.items()
                if ob.kp_index < 0 and k != mp.anchor_kf
            )
            for old in patch_kfs[:-4]:
                self.map.remove_observation(pid, old)
        self.map.update_median_depth(kf_id)

        t0 = time.perf_counter()
        mapping.triangulate_new_points(self.map, kf_id, self.cam, cfg)
        self.timing.add("orb_triangulation", time.perf_counter() - t0)

        t0 = time.perf_counter()
        stats = mapping.local_bundle_adjust(self.map, kf_id, self.cam, cfg)
        self.timing.add("local_ba", time.perf_counter() - t0)
        if stats.n_obs:
            self.ba_outlier_fractions.append(stats.outlier_fraction)

        if self.densify_enabled and kf_id in self.map.keyframes:
            t0 = time.perf_counter()
            densify_mod.densify_keyframe(self.map, kf_id, self.cam, cfg)
            self.timing.add("new_points_triangulation", time.perf_counter() - t0)

        m = cfg.mapping
        self.map.cull_points(frame.index, m.min_parallax_deg, m.max_reproj_chi2,
                             m.cull_found_ratio, m.cull_window_frames, self.cam)
        removed = []
        if kf_id % 3 == 0:  # redundancy changes slowly; no need to scan per keyframe
            removed = self.map.cull_keyframes(m.keyframe_cull_redundancy,
                                              m.keyframe_cull_keep_recent)
        if self.db is not None:
            if kf_id in self.map.keyframes:
                bow = relocate.bow_vector(kf.descriptors, self.vocab)
                kf.bow = bow
                self.db.add(kf_id, bow)
            for rid in removed:
                self.db.remove(rid)
        self._ref_kf = kf_id if kf_id in self.map.keyframes else self._ref_kf

    # -- tracker side -------------------------------------------------------------

    def process_frame(self, image: np.ndarray, timestamp: float) -> FrameResult:
        t_frame = time.perf_counter()
        self._mapper_seconds_this_frame = 0.0
        idx = self._n_frames
        self._n_frames += 1
        frame = tracking.make_frame(image, idx, timestamp, self.cfg)

        if self.state.status == tracking.INITIALIZING:
            res = self._step_initialize(frame)
        elif self.state.status == tracking.TRACKING:
            res = self._step_track(frame)
        else:
            res = self._step_lost(frame)

        self._prev_frame = frame
        # tracking time excludes inline mapper work (deterministic mode)
        spent = time.perf_counter() - t_frame - self._mapper_seconds_this_frame
        self.timing.add("tracking_total", max(spent, 0.0))
        self.results.append(res)
        return res

    def _step_initialize(self, frame) -> FrameResult:
        cfg = self.cfg
        if self._init_frame is None:
            self._init_frame = frame
            return FrameResult(frame.index, frame.timestamp, self.state.status, None)
        boot = mapping.try_bootstrap(self._init_frame, frame, self.cam, cfg)
        if boot is None:
            if frame.index - self._init_frame.index > 60:
                self._init_frame = frame
            return FrameResult(frame.index, frame.timestamp, self.state.status, None)

        # install the two keyframes and the initial structure
        f0, f1 = self._init_frame, frame
        kf0 = mapping.make_keyframe(f0, Pose.identity(), f0.timestamp)
        id0 = self.map.insert_keyframe(kf0)
        kf1 = mapping.make_keyframe(f1, boot.pose1, f1.timestamp)
        id1 = self.map.insert_keyframe(kf1)
        from .worldmap import MapPoint, PROV_ORB

        for j in range(len(boot.points)):
            ia, ib = int(boot.idx_a[j]), int(boot.idx_b[j])
            mp = MapPoint(
                id=-1,
                position=boot.points[j],
                descriptor=f1.descriptors[ib].copy(),
                provenance=PROV_ORB,
                ref_level=int(f1.kp_levels[ib]),
                created_frame=f1.index,
            )
            pid = self.map.insert_point(mp)
            self.map.add_observation(pid, id0, Observation(f0.kp_xy[ia].copy(), int(f0.kp_levels[ia]), ia))
            self.map.add_observation(pid, id1, Observation(f1.kp_xy[ib].copy(), int(f1.kp_levels[ib]), ib))
        self.map.update_median_depth(id0)
        self.map.update_median_depth(id1)
        mapping.local_bundle_adjust(self.map, id1, self.cam, cfg)
        self._rescale_to_unit_depth(id1)
        if self.densify_enabled:
            densify_mod.densify_keyframe(self.map, id1, self.cam, cfg)
        if self.db is not None:
            for kf in (kf0, kf1):
                kf.bow = relocate.bow_vector(kf.descriptors, self.vocab)
                self.db.add(kf.id, kf.bow)

        pose1 = self.map.keyframes[id1].pose
        self.state.status = tracking.TRACKING
        self.state.last_pose = pose1
        self.state.velocity = None
        self._ref_kf = id1
        self._frames_since_kf = 0
        self.trajectory.append((f0.timestamp, self.map.keyframes[id0].pose))
        self.trajectory.append((f1.timestamp, pose1))
        self._prev_sd = None
        return FrameResult(frame.index, frame.timestamp, tracking.TRACKING, pose1,
                           n_inliers=len(boot.points), keyframe=True)

    def _rescale_to_unit_depth(self, kf_id: int) -> None:
        """Fix the monocular gauge: median scene depth of the keyframe becomes 1."""
        with self.map.lock:
            med = self.map.update_median_depth(kf_id)
            if med <= 0:
                return
            s = 1.0 / med
            for mp in self.map.points.values():
                mp.position = mp.position * s
            for kf in self.map.keyframes.values():
                kf.pose = Pose(kf.pose.R, kf.pose.t * s)
                kf.median_scene_depth = kf.median_scene_depth * s
            if self.state.last_pose is not None:
                self.state.last_pose = Pose(self.state.last_pose.R, self.state.last_pose.t * s)
            self.map._dirty()

    def _step_track(self, frame) -> FrameResult:
        cfg = self.cfg
        snapshot = self.map.snapshot_tracking()

        t0 = time.perf_counter()
        outcome = tracking.track_frame(frame, snapshot, self.state, self.cam, cfg)
        self.timing.add("orb_matching", time.perf_counter() - t0)

        if not outcome.ok:
            self.state.status = tracking.LOST
            self.state.velocity = None
            self._prev_sd = None
            return self._step_lost(frame, just_lost=True)

        pose = outcome.pose
        self.state.velocity = pose.compose(self.state.last_pose.inverse())
        self.state.last_pose = pose
        self.state.matched_count = outcome.n_inliers
        self.trajectory.append((frame.timestamp, pose))
        self._frames_since_kf += 1

        # semi-dense re-tracking of densified points
        t0 = time.perf_counter()
        semidense = self.map.snapshot_semidense()
        sd = tracking.SemidenseTrack()
        sd_visible: list = []
        if semidense:
            with self.map.lock:
                kf_poses = {kid: kf.pose for kid, kf in self.map.keyframes.items()}
            sd = tracking.track_semidense(frame, self._prev_frame, self._prev_sd, semidense,
                                          pose, kf_poses, self.cam, cfg)
            pos = np.array([s[1] for s in semidense])
            _, _, vis = project_array(pos, pose, self.cam)
            sd_visible = [semidense[i][0] for i in np.where(vis)[0]]
        self.timing.add("lk_cross_correlation", time.perf_counter() - t0)
        self._prev_sd = sd

        # counters flow through the mapper (single-writer contract)
        visible = list(outcome.visible_ids) + sd_visible
        found = list(outcome.matches.inlier_ids()) + list(sd.uv.keys())
        self._dispatch(("stats", visible, found))

        # keyframe policy: how well does this frame re-track the points the
        # reference keyframe observes among those currently in view?
        ref_total = 0
        ref_tracked = 0
        if self._ref_kf is not None:
            with self.map.lock:
                ref_kf = self.map.keyframes.get(self._ref_kf)
                ref_pts = set(int(p) for p in ref_kf.observed_points()) if ref_kf else set()
            vis = set(int(p) for p in outcome.visible_ids) & ref_pts
            ref_total = len(vis)
            inl = set(int(p) for p in outcome.matches.inlier_ids())
            ref_tracked = len(inl & vis)
        is_kf = mapping.need_keyframe(self._frames_since_kf, outcome.n_inliers,
                                      ref_tracked, ref_total, self._mapper_idle(), cfg)
        if is_kf:
            pairs = [
                (int(pid), int(kp))
                for pid, kp, inl in zip(outcome.matches.point_ids, outcome.matches.kp_indices,
                                        outcome.matches.inlier)
                if inl
            ]
            sd_obs = [(int(pid), uv) for pid, uv in sd.uv.items()]
            self._dispatch(("keyframe", frame, pose, pairs, sd_obs))
            self._frames_since_kf = 0
        return FrameResult(frame.index, frame.timestamp, tracking.TRACKING, pose,
                           n_inliers=outcome.n_inliers, n_semidense=len(sd.uv), keyframe=is_kf)

    def _step_lost(self, frame, just_lost: bool = False) -> FrameResult:
        if self.db is None or self.vocab is None or not self.map.keyframes:
            return FrameResult(frame.index, frame.timestamp, tracking.LOST, None)
        res = relocate.relocalize(frame, self.map, self.db, self.vocab, self.cam, self.cfg)
        if res is None:
            return FrameResult(frame.index, frame.timestamp, tracking.LOST, None)
        self.state.status = tracking.TRACKING
        self.state.last_pose = res.pose
        self.state.velocity = None
        self.state.matched_count = int(res.inliers.sum())
        self.trajectory.append((frame.timestamp, res.pose))
        self._frames_since_kf += 1
        self._prev_sd = None
        return FrameResult(frame.index, frame.timestamp, tracking.TRACKING, res.pose,
                           n_inliers=int(res.inliers.sum()), relocalized=True)

    # -- lifecycle -------------------------------------------------------------------

    def finish(self):
        if self._mapper_thread is not None:
            self._queue.join()
            self._queue.put(None)
            self._mapper_thread.join(timeout=30)
            self._mapper_thread = None
        if self._mapper_error is not None:
            raise self._mapper_error

    def stats_text(self) -> str:
        """Table-style timing report plus run counters."""
        t = self.timing
        tracked = sum(1 for r in self.results if r.status == tracking.TRACKING)
        lines = [
            "[timing_ms]",
            f"new_points_triangulation={t.mean_ms('new_points_triangulation'):.3f}",
            f"orb_triangulation={t.mean_ms('orb_triangulation'):.3f}",
            f"orb_matching={t.mean_ms('orb_matching'):.3f}",
            f"lk_cross_correlation={t.mean_ms('lk_cross_correlation'):.3f}",
            f"tracking_total={t.mean_ms('tracking_total'):.3f}",
            "",
            "[run]",
            f"frames={len(self.results)}",
            f"tracked_frames={tracked}",
            f"keyframes={len(self.map.keyframes)}",
            f"map_points={len(self.map.points)}",
            f"densified_points={sum(1 for p in self.map.points.values() if p.provenance == 'D')}",
            f"local_ba_mean_ms={t.mean_ms('local_ba'):.3f}",
            f"ba_outlier_fraction={np.mean(self.ba_outlier_fractions) if self.ba_outlier_fractions else 0.0:.4f}",
        ]
        return "\n".join(lines) + "\n"
