"""Semi-dense map growth by correlation along epipolar segments.

For every new keyframe, ORB features that failed descriptor association get a
second chance: their patch is correlated along the epipolar segment in up to
four well-separated covisible keyframes, and survivors pass four gates
(epipolar distance, positive depth, reprojection, depth-vs-median band)
before joining the map as densified points anchored to this keyframe.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .config import Config
from .geometry import (
    CameraModel,
    epipolar_segment,
    project_array,
    triangulate_rays,
    TriangulationError,
    unproject,
)
from .optimize import project_points
from .worldmap import MapPoint, Observation, WorldMap, PROV_DENSE


def select_neighbors(wm: WorldMap, kf_id: int, cfg: Config) -> list:
    """Up to four covisible keyframes with significant baseline.

    Ordered by covisibility weight (desc) with id tie-break; candidates whose
    baseline is below ``min_baseline_ratio`` times the keyframe's median scene
    depth are skipped.
    """
    d = cfg.densify
    kf = wm.keyframes[kf_id]
    center = kf.pose.center()
    depth = max(kf.median_scene_depth, 1e-12)
    out = []
    for nid in wm.covisible(kf_id):
        nkf = wm.keyframes[nid]
        baseline = float(np.linalg.norm(nkf.pose.center() - center))
        if baseline / depth >= d.min_baseline_ratio:
            out.append(nid)
        if len(out) == d.max_neighbors:
            break
    return out


def _second_best(scores, seg_level, best_idx, min_sep_px=3.0):
    """Best score at least ``min_sep_px`` away from the winning sample."""
    d = np.linalg.norm(seg_level - seg_level[best_idx], axis=1)
    far = d > min_sep_px
    if not far.any():
        return -2.0
    return float(scores[far].max())


def densify_keyframe(wm: WorldMap, kf_id: int, cam: CameraModel, cfg: Config) -> list:
    """Algorithm: correlate unmatched features of ``kf_id`` against neighbors.

    Returns ids of the new densified points. Existing points are never
    touched; a feature matched in several neighbors keeps the triangulation
    with the lowest mean reprojection error and the other matches become extra
    observations when they pass the reprojection gate.
    """
    d = cfg.densify
    scale = wm.scale_factor
    with wm.lock:
        kf = wm.keyframes[kf_id]
        neighbors = select_neighbors(wm, kf_id, cfg)
        if not neighbors:
            return []
        med = kf.median_scene_depth
        depth_lo = d.depth_range_lo * med
        depth_hi = d.depth_range_hi * med

        # a feature only counts as unmatched if no existing map point already
        # lands near it in this keyframe (otherwise every densified point
        # would be re-reconstructed by each later keyframe)
        cell = 3.0
        occupied = set()

        def occupy(u, v):
            cu, cv = int(u // cell), int(v // cell)
            occupied.add((cu, cv))

        for kp_idx in kf.point_for_kp:
            occupy(kf.kp_xy[kp_idx, 0], kf.kp_xy[kp_idx, 1])
        if wm.points:
            all_pos = np.array([mp.position for mp in wm.points.values()])
            uv_all, _, vis = project_array(all_pos, kf.pose, cam)
            for u, v in uv_all[vis]:
                occupy(u, v)

        def near_occupied(u, v):
            cu, cv = int(u // cell), int(v // cell)
            for du in (-1, 0, 1):
                for dv in (-1, 0, 1):
                    if (cu + du, cv + dv) in occupied:
                        return True
            return False

        unmatched = [
            i for i in range(len(kf.kp_xy))
            if i not in kf.point_for_kp and not near_occupied(kf.kp_xy[i, 0], kf.kp_xy[i, 1])
        ]
        if not unmatched:
            return []

        # anchor patches at each feature's own pyramid level
        patches = {}
        for i in unmatched:
            lv = int(kf.kp_levels[i])
            img = kf.pyramid_levels[lv]
            s = scale**lv
            xl = (kf.kp_xy[i, 0] + 0.5) / s - 0.5
            yl = (kf.kp_xy[i, 1] + 0.5) / s - 0.5
            patch = kernels.extract_patch(img, xl, yl, d.patch_size, d.patch_size)
            if patch is None or patch.std() < 1e-9:
                continue
            patches[i] = patch

        # candidate matches: feature -> list of (mean reproj, X, nid, uv_n, level)
        candidates = {}
        for nid in neighbors:
            nkf = wm.keyframes[nid]
            for i, patch in patches.items():
                lv = int(kf.kp_levels[i])
                try:
                    seg, _ = epipolar_segment(
                        kf.kp_xy[i], kf.pose, nkf.pose, cam, (depth_lo, depth_hi), margin=-6.0
                    )
                except Exception:
                    continue
                if len(seg) < 3:
                    continue
                s = scale**lv
                seg_l = (seg + 0.5) / s - 0.5
                img_n = nkf.pyramid_levels[lv]
                scores = kernels.zncc_scan(
                    img_n, patch, np.ascontiguousarray(seg_l[:, 0]), np.ascontiguousarray(seg_l[:, 1])
                )
                j = int(np.argmax(scores))
                best = float(scores[j])
                if best < d.zncc_min:
                    continue
                if _second_best(scores, seg_l, j) > d.distinct_ratio * best:
                    continue
                # subpixel refinement along the segment
                uv_n = seg[j]
                if 0 < j < len(scores) - 1 and scores[j - 1] > -2 and scores[j + 1] > -2:
                    denom = scores[j - 1] - 2 * scores[j] + scores[j + 1]
                    if abs(denom) > 1e-12:
                        dt = float(np.clip(0.5 * (scores[j - 1] - scores[j + 1]) / denom, -1.0, 1.0))
                        k2 = j + 1 if dt > 0 else j - 1
                        uv_n = seg[j] * (1 - abs(dt)) + seg[k2] * abs(dt)
                # gate 1: distance to the epipolar segment (zero by construction,
                # kept explicit for the contract)
                seg_d = np.linalg.norm(seg - uv_n, axis=1).min()
                if seg_d > d.epipolar_tol_px:
                    continue
                try:
                    ray_c = unproject(kf.kp_xy[i], cam)
                    ray_n = unproject(uv_n, cam)
                    X = triangulate_rays(ray_c, kf.pose, ray_n, nkf.pose)
                except Exception:
                    continue
                zc = (kf.pose.R @ X + kf.pose.t)[2]
                zn = (nkf.pose.R @ X + nkf.pose.t)[2]
                if zc <= 0 or zn <= 0:
                    continue  # gate 2
                uvc, _, _, fc = project_points(kf.pose.R, kf.pose.t, X[None], cam)
                uvn, _, _, fn = project_points(nkf.pose.R, nkf.pose.t, X[None], cam)
                if not (fc[0] and fn[0]):
                    continue
                ec = float(((uvc[0] - kf.kp_xy[i]) ** 2).sum()) / scale ** (2 * lv)
                en = float(((uvn[0] - uv_n) ** 2).sum()) / scale ** (2 * lv)
                if ec > cfg.mapping.max_reproj_chi2 or en > cfg.mapping.max_reproj_chi2:
                    continue  # gate 3
                if not (med / d.depth_band <= zc <= med * d.depth_band):
                    continue  # gate 4
                candidates.setdefault(i, []).append((0.5 * (ec + en), X, nid, uv_n, lv))

        new_ids = []
        for i in sorted(candidates):
            cands = sorted(candidates[i], key=lambda c: (c[0], c[2]))
            err, X, nid, uv_n, lv = cands[0]
            mp = MapPoint(
                id=-1,
                position=X,
                descriptor=kf.descriptors[i].copy(),
                provenance=PROV_DENSE,
                ref_level=lv,
                created_frame=kf.frame_index,
                anchor_kf=kf_id,
                anchor_patch=patches[i],
                anchor_level=lv,
                anchor_uv=kf.kp_xy[i].copy(),
            )
            pid = wm.insert_point(mp)
            wm.add_observation(pid, kf_id, Observation(kf.kp_xy[i].copy(), lv, i))
            wm.add_observation(pid, nid, Observation(np.asarray(uv_n, dtype=np.float64), lv, -1))
            # extra observations from the losing neighbors (gate 3 re-check)
            for err2, X2, nid2, uv2, lv2 in cands[1:]:
                if nid2 == nid:
                    continue
                nkf2 = wm.keyframes[nid2]
                uvp, _, _, fr = project_points(nkf2.pose.R, nkf2.pose.t, X[None], cam)
                if not fr[0]:
                    continue
                e2 = float(((uvp[0] - uv2) ** 2).sum()) / scale ** (2 * lv2)
                if e2 <= cfg.mapping.max_reproj_chi2:
                    wm.add_observation(pid, nid2, Observation(np.asarray(uv2, dtype=np.float64), lv2, -1))
            new_ids.append(pid)
        return new_ids
