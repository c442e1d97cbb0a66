"""Per-frame camera tracking.

The tracker never mutates the map: it consumes array snapshots, matches
projected map points against the frame's features inside enlarged search
regions, refines the pose with the Huber optimizer, and re-tracks densified
points by pyramidal Lucas-Kanade with an epipolar correlation fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import features, kernels
from .config import Config
from .geometry import CameraModel, Pose, epipolar_segment, quat_from_rotation, rotation_from_quat
from .optimize import InsufficientData, huber, pose_optimize  # noqa: F401  (huber re-exported)

INITIALIZING = "initializing"
TRACKING = "tracking"
LOST = "lost"


class TrackingError(Exception):
    pass


@dataclass
class Frame:
    index: int
    timestamp: float
    image: np.ndarray
    pyramid: features.ImagePyramid
    keypoints: list
    kp_xy: np.ndarray
    kp_levels: np.ndarray
    descriptors: np.ndarray
    grid: features.FeatureGrid
    lk_pyramid: list


def make_frame(image: np.ndarray, index: int, timestamp: float, cfg: Config) -> Frame:
    """Detect and describe features once per frame."""
    f = cfg.features
    pyr = features.build_pyramid(image, f.n_levels, f.scale_factor)
    kps = features.detect(pyr, f.target_keypoints, (f.grid_cols, f.grid_rows), f.fast_threshold)
    desc, dropped = features.describe(pyr, kps, f.blur_radius)
    if dropped:
        keep = sorted(set(range(len(kps))) - set(dropped))
        kps = [kps[i] for i in keep]
        desc = desc[keep]
    kp_xy = np.array([[k.x, k.y] for k in kps], dtype=np.float64).reshape(-1, 2)
    kp_levels = np.array([k.level for k in kps], dtype=np.int32)
    grid = features.FeatureGrid(kp_xy, pyr.width, pyr.height)
    lk = features.build_flow_pyramid(image, cfg.tracking.lk_levels)
    return Frame(index, timestamp, image, pyr, kps, kp_xy, kp_levels, desc, grid, lk)


@dataclass
class TrackState:
    status: str = INITIALIZING
    last_pose: Pose | None = None
    velocity: Pose | None = None
    matched_count: int = 0


def predict_pose(state: TrackState) -> Pose:
    """Constant-velocity prediction: advance the last pose by the velocity."""
    if state.status != TRACKING or state.last_pose is None:
        raise TrackingError("predict_pose requires an active track")
    if state.velocity is None:
        return state.last_pose
    return state.velocity.compose(state.last_pose)


@dataclass
class FrameMatches:
    point_ids: np.ndarray
    kp_indices: np.ndarray
    inlier: np.ndarray

    def inlier_ids(self):
        return self.point_ids[self.inlier]


@dataclass
class TrackOutcome:
    ok: bool
    pose: Pose | None
    matches: FrameMatches
    visible_ids: np.ndarray
    n_inliers: int


def track_frame(frame: Frame, snapshot, state: TrackState, cam: CameraModel, cfg: Config,
                pose_override: Pose | None = None) -> TrackOutcome:
    """Match projected map points and refine the predicted pose.

    ``snapshot`` is (ids, positions, descriptors, ref_levels) from the map.
    Returns ok=False (lost) when fewer than the configured inliers survive.
    """
    ids, pos, desc, ref_levels = snapshot
    pred = pose_override if pose_override is not None else predict_pose(state)
    empty = FrameMatches(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool))
    if len(ids) == 0 or len(frame.kp_xy) == 0:
        return TrackOutcome(False, None, empty, np.zeros(0, dtype=np.int64), 0)

    m = cfg.matching
    from .geometry import project_array

    uv, z, valid = project_array(pos, pred, cam, margin=m.search_radius_px * m.search_region_factor * 4)
    vis_idx = np.where(valid)[0]
    if len(vis_idx) == 0:
        return TrackOutcome(False, None, empty, np.zeros(0, dtype=np.int64), 0)
    scale = cfg.features.scale_factor
    radii = m.search_radius_px * m.search_region_factor * scale ** ref_levels[vis_idx].astype(np.float64)
    best_idx, best_dist = frame.grid.match(
        uv[vis_idx], radii, ref_levels[vis_idx], desc[vis_idx],
        frame.kp_xy, frame.kp_levels, frame.descriptors,
        max_hamming=m.max_hamming, level_slack=1,
    )
    got = best_idx >= 0
    cand_pt = vis_idx[got]
    cand_kp = best_idx[got]
    cand_d = best_dist[got]
    if len(cand_pt) == 0:
        return TrackOutcome(False, None, empty, ids[vis_idx], 0)

    # one keypoint keeps only its best point (distance, then lower point index)
    order = np.lexsort((cand_pt, cand_d, cand_kp))
    cand_pt, cand_kp, cand_d = cand_pt[order], cand_kp[order], cand_d[order]
    first = np.concatenate([[True], cand_kp[1:] != cand_kp[:-1]])
    cand_pt, cand_kp = cand_pt[first], cand_kp[first]

    visible_ids = ids[vis_idx]
    if len(cand_pt) < 4:
        return TrackOutcome(False, None, empty, visible_ids, 0)
    t = cfg.tracking
    try:
        result = pose_optimize(
            pred,
            pos[cand_pt],
            frame.kp_xy[cand_kp],
            frame.kp_levels[cand_kp],
            cam,
            scale_factor=scale,
            rounds=t.opt_rounds,
            iters=t.opt_iters,
            chi2_thresh=cfg.mapping.max_reproj_chi2,
        )
    except InsufficientData:
        return TrackOutcome(False, None, empty, visible_ids, 0)
    matches = FrameMatches(ids[cand_pt], cand_kp.astype(np.int64), result.inliers)
    n_in = int(result.inliers.sum())
    if n_in < t.min_inliers:
        return TrackOutcome(False, None, matches, visible_ids, n_in)
    return TrackOutcome(True, result.pose, matches, visible_ids, n_in)


@dataclass
class SemidenseTrack:
    """Per-frame observations for densified points."""

    uv: dict = field(default_factory=dict)      # point_id -> (u, v) level-0
    via: dict = field(default_factory=dict)     # point_id -> "lk" | "zncc"
    fails: dict = field(default_factory=dict)   # point_id -> consecutive misses


def track_semidense(frame: Frame, prev_frame: Frame | None, prev_track: SemidenseTrack | None,
                    semidense, pose: Pose, keyframe_poses, cam: CameraModel, cfg: Config) -> SemidenseTrack:
    """Two-stage re-tracking of densified points in the current frame.

    Stage 1 follows points tracked in the previous frame with pyramidal LK and
    a forward-backward check. Stage 2 rescues the rest by correlating the
    anchor-keyframe patch along the epipolar segment implied by the current
    pose estimate.
    """
    out = SemidenseTrack()
    if not semidense:
        return out
    t = cfg.tracking
    half = t.lk_window // 2

    # stage 1: LK from previous positions
    lk_ids = []
    lk_pts = []
    if prev_frame is not None and prev_track is not None:
        for pid, _, _, _, _, _ in semidense:
            p = prev_track.uv.get(pid)
            if p is not None:
                lk_ids.append(pid)
                lk_pts.append(p)
    if lk_ids:
        pts = np.asarray(lk_pts, dtype=np.float64)
        fwd, st_f = kernels.lk_track(prev_frame.lk_pyramid, frame.lk_pyramid, pts,
                                     half_win=half, iters=t.lk_iters)
        # the check runs at the finest level only: per-frame flow is small and
        # the backward pass just validates the forward solution
        back, st_b = kernels.lk_track(frame.lk_pyramid[:1], prev_frame.lk_pyramid[:1], fwd,
                                      half_win=half, iters=t.lk_iters)
        err = np.linalg.norm(back - pts, axis=1)
        ok = (st_f > 0) & (st_b > 0) & (err <= t.lk_fb_max_px)
        h, w = frame.image.shape
        ok &= (fwd[:, 0] >= 0) & (fwd[:, 0] <= w - 1) & (fwd[:, 1] >= 0) & (fwd[:, 1] <= h - 1)
        for i, pid in enumerate(lk_ids):
            if ok[i]:
                out.uv[pid] = (float(fwd[i, 0]), float(fwd[i, 1]))
                out.via[pid] = "lk"

    # stage 2: epipolar correlation with the anchor patch, budgeted per frame
    # (rotating start index so skipped points get their turn on later frames)
    prev_fails = prev_track.fails if prev_track is not None else {}
    pending = []
    for rec in semidense:
        pid = rec[0]
        if pid in out.uv:
            continue
        # chronic failures retire to an occasional retry so they stop
        # consuming the per-frame budget
        if prev_fails.get(pid, 0) >= 3 and (frame.index + pid) % 30 != 0:
            out.fails[pid] = prev_fails[pid]
            continue
        pending.append(rec)
    if pending:
        from .geometry import project_array

        pos = np.array([rec[1] for rec in pending])
        _, _, vis = project_array(pos, pose, cam, margin=-features.BORDER)
        pending = [rec for rec, v in zip(pending, vis) if v]
    budget = t.semidense_zncc_budget
    if budget > 0 and len(pending) > budget:
        start = (frame.index * budget) % len(pending)
        pending = (pending + pending)[start : start + budget]
    for pid, position, patch, level, anchor_kf, anchor_uv in pending:
        if pid in out.uv:
            continue
        anchor_pose = keyframe_poses.get(anchor_kf)
        if anchor_pose is None or patch is None:
            continue
        d_anchor = float(anchor_pose.transform(position)[2])
        if d_anchor <= 0:
            continue
        band = t.semidense_depth_band
        seg, _ = epipolar_segment(anchor_uv, anchor_pose, pose, cam,
                                  (d_anchor * (1 - band), d_anchor * (1 + band)),
                                  margin=-features.BORDER)
        if len(seg) == 0:
            continue
        lvl_img = frame.pyramid.levels[level]
        seg_l = frame.pyramid.to_level(seg, level)
        scores = kernels.zncc_scan(lvl_img, patch, np.ascontiguousarray(seg_l[:, 0]),
                                   np.ascontiguousarray(seg_l[:, 1]))
        j = int(np.argmax(scores))
        if scores[j] < t.semidense_zncc_min:
            continue
        # parabolic refinement along the segment
        pos_l = seg_l[j]
        if 0 < j < len(scores) - 1 and np.isfinite(scores[j - 1]) and np.isfinite(scores[j + 1]):
            denom = scores[j - 1] - 2 * scores[j] + scores[j + 1]
            if abs(denom) > 1e-12:
                dt = 0.5 * (scores[j - 1] - scores[j + 1]) / denom
                dt = float(np.clip(dt, -1.0, 1.0))
                k2 = j + 1 if dt > 0 else j - 1
                frac = abs(dt)
                pos_l = seg_l[j] * (1 - frac) + seg_l[k2] * frac
        uv0 = frame.pyramid.to_level0(pos_l, level)
        out.uv[pid] = (float(uv0[0]), float(uv0[1]))
        out.via[pid] = "zncc"
    return out


def save_trajectory(path, rows) -> None:
    """One line per tracked frame: timestamp tx ty tz qx qy qz qw (camera-in-world)."""
    with open(path, "w", encoding="ascii") as fh:
        for ts, pose in rows:
            c = pose.center()
            q = quat_from_rotation(pose.R.T)
            fh.write(
                f"{ts:.6f} {c[0]:.9f} {c[1]:.9f} {c[2]:.9f} "
                f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}\n"
            )


def load_trajectory(path):
    """Returns (timestamps (N,), poses list of world-to-camera Pose)."""
    ts = []
    poses = []
    with open(path, "r", encoding="ascii") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise TrackingError(f"{path}: expected 8 fields per line")
            t, tx, ty, tz, qx, qy, qz, qw = vals
            R_cw = rotation_from_quat((qw, qx, qy, qz))
            c = np.array([tx, ty, tz])
            ts.append(t)
            poses.append(Pose(R_cw.T, -R_cw.T @ c))
    return np.array(ts), poses
