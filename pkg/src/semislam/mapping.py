"""Map construction: bootstrap, keyframe policy, triangulation, local BA.

The mapper owns all map mutation. New keyframes trigger (1) ORB triangulation
of unassociated features against covisible keyframes under the parallax /
depth / reprojection gates, (2) optional densification (see densify module),
(3) local bundle adjustment over the covisibility window with outlier
detachment, and (4) point/keyframe culling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import features, kernels
from .config import Config
from .geometry import (
    CameraModel,
    Pose,
    parallax_deg,
    parallax_deg_array,
    triangulate_rays,
    TriangulationError,
    unproject_array,
)
from .optimize import BundleProblem, project_points
from .worldmap import KeyFrame, MapPoint, Observation, WorldMap, PROV_ORB


class MappingError(Exception):
    pass


def need_keyframe(frames_since_kf: int, tracked_inliers: int, ref_kf_visible_now: int,
                  ref_kf_total: int, mapper_idle: bool, cfg: Config) -> bool:
    """Keyframe insertion policy.

    True when the mapper is idle, enough inliers survive, and either many
    frames elapsed or retracking of the reference keyframe decayed.
    """
    m = cfg.mapping
    if not mapper_idle or tracked_inliers < m.keyframe_min_inliers:
        return False
    if frames_since_kf >= m.keyframe_min_gap:
        return True
    if ref_kf_total > 0 and ref_kf_visible_now < m.keyframe_retrack_ratio * ref_kf_total:
        return True
    return False


# -- two-view bootstrap -----------------------------------------------------------


def _mutual_matches(desc_a, desc_b, max_hamming):
    """Mutually-nearest Hamming matches under the acceptance threshold."""
    if len(desc_a) == 0 or len(desc_b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    D = kernels.hamming_pairwise(desc_a, desc_b)
    best_ab = D.argmin(axis=1)
    best_ba = D.argmin(axis=0)
    ia = np.arange(len(desc_a))
    good = (best_ba[best_ab] == ia) & (D[ia, best_ab] <= max_hamming)
    return np.stack([ia[good], best_ab[good]], axis=1)


def _eight_point(x1, x2):
    """Essential matrix from >= 8 normalized correspondences.

    Hartley-conditioned DLT followed by projection onto the essential
    manifold (equal singular values, rank 2).
    """

    def conditioner(x):
        c = x.mean(axis=0)
        d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
        s = math.sqrt(2.0) / max(d, 1e-12)
        T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
        return (x - c) * s, T

    n1, T1 = conditioner(x1)
    n2, T2 = conditioner(x2)
    A = np.stack(
        [
            n2[:, 0] * n1[:, 0], n2[:, 0] * n1[:, 1], n2[:, 0],
            n2[:, 1] * n1[:, 0], n2[:, 1] * n1[:, 1], n2[:, 1],
            n1[:, 0], n1[:, 1], np.ones(len(n1)),
        ],
        axis=1,
    )
    _, _, Vt = np.linalg.svd(A)
    F = T2.T @ Vt[-1].reshape(3, 3) @ T1
    U, s, Vt = np.linalg.svd(F)
    sm = (s[0] + s[1]) / 2.0
    return U @ np.diag([sm, sm, 0.0]) @ Vt


def _sampson_sq(E, x1, x2):
    h1 = np.concatenate([x1, np.ones((len(x1), 1))], axis=1)
    h2 = np.concatenate([x2, np.ones((len(x2), 1))], axis=1)
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.einsum("ij,ij->i", h2, Ex1) ** 2
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


@dataclass
class BootstrapResult:
    pose1: Pose
    points: np.ndarray          # (P, 3), median depth normalized to 1
    idx_a: np.ndarray           # matched keypoint index in the reference frame
    idx_b: np.ndarray
    median_parallax: float


def try_bootstrap(frame_a, frame_b, cam: CameraModel, cfg: Config):
    """Two-view initialization: E-matrix RANSAC, cheirality vote, triangulation.

    Returns BootstrapResult or None when geometry is not yet good enough.
    """
    m = cfg.mapping
    pairs = _mutual_matches(frame_a.descriptors, frame_b.descriptors, cfg.matching.max_hamming)
    if len(pairs) < m.init_min_matches:
        return None
    ra, ok_a = unproject_array(frame_a.kp_xy[pairs[:, 0]], cam)
    rb, ok_b = unproject_array(frame_b.kp_xy[pairs[:, 1]], cam)
    keep = ok_a & ok_b
    pairs, ra, rb = pairs[keep], ra[keep], rb[keep]
    x1 = ra[:, :2] / ra[:, 2:3]
    x2 = rb[:, :2] / rb[:, 2:3]
    n = len(pairs)
    if n < m.init_min_matches:
        return None

    rng = np.random.default_rng(np.random.PCG64(m.ransac_seed))
    gate = (2.0 / cam.fx) ** 2
    best_inl = None
    best_count = 0
    max_iters = 300
    it = 0
    while it < max_iters:
        it += 1
        sel = rng.choice(n, 8, replace=False)
        try:
            E = _eight_point(x1[sel], x2[sel])
        except np.linalg.LinAlgError:
            continue
        err = _sampson_sq(E, x1, x2)
        inl = err < gate
        c = int(inl.sum())
        if c > best_count:
            best_count = c
            best_inl = inl
            if c > 0.5 * n:
                frac = c / n
                denom = math.log(max(1e-12, 1 - frac**8))
                if denom < 0:
                    max_iters = min(max_iters, it + int(math.log(0.01) / denom) + 1)
    if best_inl is None or best_count < m.init_min_matches:
        return None
    # refit on the consensus set until it stabilizes
    inl = best_inl
    for _ in range(5):
        try:
            E = _eight_point(x1[inl], x2[inl])
        except np.linalg.LinAlgError:
            return None
        err = _sampson_sq(E, x1, x2)
        new_inl = err < gate
        if new_inl.sum() < 8 or np.array_equal(new_inl, inl):
            break
        inl = new_inl
    if inl.sum() < m.init_min_matches:
        return None

    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    pose0 = Pose.identity()
    best = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for tsign in (U[:, 2], -U[:, 2]):
            pose1 = Pose(R, tsign)
            pts = []
            good_idx = []
            for i in np.where(inl)[0]:
                try:
                    X = triangulate_rays(ra[i], pose0, rb[i], pose1)
                except TriangulationError:
                    continue
                z0 = X[2]
                z1 = (pose1.R @ X + pose1.t)[2]
                if z0 <= 0 or z1 <= 0:
                    continue
                pts.append(X)
                good_idx.append(i)
            if best is None or len(pts) > len(best[2]):
                best = (pose1, np.array(good_idx, dtype=np.int64), np.array(pts).reshape(-1, 3))
    pose1, good_idx, pts = best
    if len(pts) < max(30, m.init_min_matches // 2):
        return None

    # robust two-view refinement: the minimal-sample essential matrix is a
    # compromise fit on quasi-planar scenes; BA on the triangulated seed
    # converges to the true relative geometry
    scale_f = cfg.features.scale_factor
    prob = BundleProblem(cam, huber_delta=math.sqrt(m.max_reproj_chi2))
    prob.add_camera(pose0, fixed=True)
    c1 = prob.add_camera(pose1, fixed=False)
    prob.set_points(pts)
    for j, gi in enumerate(good_idx):
        ia, ib = pairs[gi]
        prob.add_observation(0, j, frame_a.kp_xy[ia], scale_f ** (-float(frame_a.kp_levels[ia])))
        prob.add_observation(c1, j, frame_b.kp_xy[ib], scale_f ** (-float(frame_b.kp_levels[ib])))
    try:
        prob.optimize(iters=15)
    except np.linalg.LinAlgError:
        return None
    pose1 = prob.poses[c1]

    # re-triangulate every mutual match against the refined geometry
    ca, cb = pose0.center(), pose1.center()
    fin_pts = []
    fin_idx = []
    for i in range(n):
        try:
            X = triangulate_rays(ra[i], pose0, rb[i], pose1)
        except TriangulationError:
            continue
        z0 = X[2]
        z1 = (pose1.R @ X + pose1.t)[2]
        if z0 <= 0 or z1 <= 0:
            continue
        uv0, _, _, fr0 = project_points(pose0.R, pose0.t, X[None], cam)
        uv1, _, _, fr1 = project_points(pose1.R, pose1.t, X[None], cam)
        if not (fr0[0] and fr1[0]):
            continue
        ia, ib = pairs[i]
        e0 = float(((uv0[0] - frame_a.kp_xy[ia]) ** 2).sum()) / scale_f ** (2 * frame_a.kp_levels[ia])
        e1 = float(((uv1[0] - frame_b.kp_xy[ib]) ** 2).sum()) / scale_f ** (2 * frame_b.kp_levels[ib])
        if e0 > m.max_reproj_chi2 or e1 > m.max_reproj_chi2:
            continue
        fin_pts.append(X)
        fin_idx.append(i)
    if len(fin_pts) < m.init_min_matches or len(fin_pts) < 0.5 * n:
        return None
    fin_pts = np.array(fin_pts)
    fin_idx = np.array(fin_idx, dtype=np.int64)
    par = parallax_deg_array(fin_pts, pose0.center(), pose1.center())
    med_par = float(np.median(par))
    if med_par < m.init_min_parallax_deg:
        return None
    keep = par >= m.init_min_parallax_deg
    fin_pts = fin_pts[keep]
    fin_idx = fin_idx[keep]
    if len(fin_pts) < m.init_min_matches:
        return None

    depths = (fin_pts @ pose1.R.T + pose1.t)[:, 2]
    scale = 1.0 / float(np.median(depths))
    fin_pts = fin_pts * scale
    pose1 = Pose(pose1.R, pose1.t * scale)
    return BootstrapResult(
        pose1=pose1,
        points=fin_pts,
        idx_a=pairs[fin_idx, 0],
        idx_b=pairs[fin_idx, 1],
        median_parallax=med_par,
    )


# -- keyframe insertion / triangulation ----------------------------------------


def make_keyframe(frame, pose: Pose, timestamp: float) -> KeyFrame:
    return KeyFrame(
        id=-1,
        frame_index=frame.index,
        timestamp=timestamp,
        pose=pose,
        kp_xy=frame.kp_xy,
        kp_levels=frame.kp_levels,
        descriptors=frame.descriptors,
        pyramid_levels=list(frame.pyramid.levels),
    )


def triangulate_new_points(wm: WorldMap, kf_id: int, cam: CameraModel, cfg: Config,
                           max_neighbors: int = 5) -> list:
    """ORB-route map growth: epipolar-consistent matches vs covisible keyframes."""
    m = cfg.mapping
    kf = wm.keyframes[kf_id]
    neighbors = wm.covisible(kf_id, k=max_neighbors)
    new_ids = []
    scale = wm.scale_factor
    unmatched = np.array(
        [i for i in range(len(kf.kp_xy)) if i not in kf.point_for_kp], dtype=np.int64
    )
    if len(unmatched) == 0:
        return new_ids
    rays_c, ok_c = unproject_array(kf.kp_xy[unmatched], cam)
    for nid in neighbors:
        nkf = wm.keyframes[nid]
        free_c = np.array([i for i in unmatched if i not in kf.point_for_kp], dtype=np.int64)
        if len(free_c) == 0:
            break
        free_n = np.array(
            [i for i in range(len(nkf.kp_xy)) if i not in nkf.point_for_kp], dtype=np.int64
        )
        if len(free_n) == 0:
            continue
        pairs = _mutual_matches(kf.descriptors[free_c], nkf.descriptors[free_n], cfg.matching.max_hamming)
        if len(pairs) == 0:
            continue
        ia = free_c[pairs[:, 0]]
        ib = free_n[pairs[:, 1]]
        ra, ok_a = unproject_array(kf.kp_xy[ia], cam)
        rb, ok_b = unproject_array(nkf.kp_xy[ib], cam)
        # epipolar consistency against the known relative pose
        rel = nkf.pose.compose(kf.pose.inverse())
        tx = rel.t
        Tx = np.array([[0, -tx[2], tx[1]], [tx[2], 0, -tx[0]], [-tx[1], tx[0], 0]])
        E = Tx @ rel.R
        x1 = ra[:, :2] / ra[:, 2:3]
        x2 = rb[:, :2] / rb[:, 2:3]
        samp = _sampson_sq(E, x1, x2) * cam.fx * cam.fx
        ok = ok_a & ok_b & (samp <= 2.5**2)
        ca, cb = kf.pose.center(), nkf.pose.center()
        for k in np.where(ok)[0]:
            i_c, i_n = int(ia[k]), int(ib[k])
            if i_c in kf.point_for_kp or i_n in nkf.point_for_kp:
                continue
            try:
                X = triangulate_rays(ra[k], kf.pose, rb[k], nkf.pose)
            except TriangulationError:
                continue
            if parallax_deg(X, ca, cb) < m.min_parallax_deg:
                continue
            zc = (kf.pose.R @ X + kf.pose.t)[2]
            zn = (nkf.pose.R @ X + nkf.pose.t)[2]
            if zc <= 0 or zn <= 0:
                continue
            uvc, _, _, fc = project_points(kf.pose.R, kf.pose.t, X[None], cam)
            uvn, _, _, fn = project_points(nkf.pose.R, nkf.pose.t, X[None], cam)
            if not (fc[0] and fn[0]):
                continue
            lv_c = int(kf.kp_levels[i_c])
            lv_n = int(nkf.kp_levels[i_n])
            ec = float(((uvc[0] - kf.kp_xy[i_c]) ** 2).sum()) / scale ** (2 * lv_c)
            en = float(((uvn[0] - nkf.kp_xy[i_n]) ** 2).sum()) / scale ** (2 * lv_n)
            if ec > m.max_reproj_chi2 or en > m.max_reproj_chi2:
                continue
            mp = MapPoint(
                id=-1,
                position=X,
                descriptor=kf.descriptors[i_c].copy(),
                provenance=PROV_ORB,
                ref_level=lv_c,
                created_frame=kf.frame_index,
            )
            pid = wm.insert_point(mp)
            wm.add_observation(pid, kf_id, Observation(kf.kp_xy[i_c].copy(), lv_c, i_c))
            wm.add_observation(pid, nid, Observation(nkf.kp_xy[i_n].copy(), lv_n, i_n))
            new_ids.append(pid)
    return new_ids


@dataclass
class BAStats:
    initial_cost: float = 0.0
    final_cost: float = 0.0
    n_obs: int = 0
    n_poses: int = 0
    n_points: int = 0
    flagged_obs: int = 0
    removed_points: int = 0

    @property
    def outlier_fraction(self) -> float:
        return self.flagged_obs / self.n_obs if self.n_obs else 0.0


def local_bundle_adjust(wm: WorldMap, center_kf: int, cam: CameraModel, cfg: Config,
                        use_schur: bool = True) -> BAStats:
    """Robust BA over the covisibility window of ``center_kf``.

    Keyframes outside the window observing window points join as fixed
    anchors; the map's first keyframe is always fixed. After convergence the
    chi-square gate re-runs and failing observations are detached; points left
    with fewer than two observations are removed.
    """
    m = cfg.mapping
    stats = BAStats()
    with wm.lock:
        if center_kf not in wm.keyframes:
            raise MappingError(f"unknown keyframe {center_kf}")
        window = [center_kf] + wm.covisible(center_kf, k=m.local_ba_window)
        window_set = set(window)
        point_ids = sorted({pid for kid in window for pid in wm.keyframes[kid].observed_points()})
        if not point_ids:
            return stats
        anchors = sorted(
            {kid for pid in point_ids for kid in wm.points[pid].observations if kid not in window_set}
        )
        first_kf = min(wm.keyframes)
        kf_order = sorted(window_set | set(anchors))
        prob = BundleProblem(cam, huber_delta=math.sqrt(m.max_reproj_chi2))
        cam_index = {}
        n_free = 0
        for kid in kf_order:
            fixed = kid in anchors or kid == first_kf
            cam_index[kid] = prob.add_camera(wm.keyframes[kid].pose, fixed=fixed)
            if not fixed:
                n_free += 1
        if n_free == 0 and len(kf_order) <= 1:
            return stats
        pt_index = {pid: i for i, pid in enumerate(point_ids)}
        prob.set_points(np.array([wm.points[pid].position for pid in point_ids]))
        scale = wm.scale_factor
        o_cam, o_pt, o_uv, o_sig = [], [], [], []
        for pid in point_ids:
            mp = wm.points[pid]
            for kid in sorted(mp.observations):
                if kid not in cam_index:
                    continue
                ob = mp.observations[kid]
                o_cam.append(cam_index[kid])
                o_pt.append(pt_index[pid])
                o_uv.append(ob.uv)
                o_sig.append(scale ** (-ob.level))
        prob.add_observations_bulk(o_cam, o_pt, o_uv, o_sig)
        stats.n_obs = len(prob._obs_cam)
        stats.n_poses = n_free
        stats.n_points = len(point_ids)
        if stats.n_obs < 8:
            return stats
        stats.initial_cost = prob.robust_cost()
        try:
            stats.final_cost, _, _ = prob.optimize(iters=m.local_ba_iters, use_schur=use_schur,
                                                   tol=1e-6)
        except np.linalg.LinAlgError:
            return stats

        # write back
        for kid in kf_order:
            if not prob.fixed[cam_index[kid]]:
                wm.keyframes[kid].pose = prob.poses[cam_index[kid]]
        for pid in point_ids:
            wm.points[pid].position = prob.points[pt_index[pid]].copy()
        wm._dirty()

        # post-BA gate: detach non-rigid observations
        chi2 = prob.chi2()
        flagged = np.where(chi2 > m.max_reproj_chi2)[0]
        stats.flagged_obs = len(flagged)
        inv_pt = {v: k for k, v in pt_index.items()}
        inv_cam = {v: k for k, v in cam_index.items()}
        for obs_i in flagged:
            pid = inv_pt[int(prob.obs_pt[obs_i])]
            kid = inv_cam[int(prob.obs_cam[obs_i])]
            wm.remove_observation(pid, kid)
        for pid in point_ids:
            mp = wm.points.get(pid)
            if mp is not None and len(mp.observations) < 2:
                wm.remove_point(pid)
                stats.removed_points += 1
        for kid in window:
            if kid in wm.keyframes:
                wm.update_median_depth(kid)
    return stats
