"""Robust nonlinear least squares on reprojection errors.

Two entry points share the same residual/Jacobian machinery and the same
damped Gauss-Newton loop contract (robust cost never increases across
accepted iterations):

* ``pose_optimize`` — 6-DoF pose-only refinement with inlier reclassification
  rounds (used by the tracker and the relocalizer).
* ``BundleProblem`` — joint poses+points problem with block-sparse normal
  equations solved by Schur elimination of the point blocks (used by local
  bundle adjustment). A dense solve of the identical damped system is kept as
  a reference path.

Residuals are normalized per pyramid level: r = (u_obs - proj) / s^level, so
the squared norm is directly comparable to the chi-square style gate (0.5991).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, Pose, rotation_exp

CHI2_GATE = 0.5991
HUBER_DELTA = math.sqrt(CHI2_GATE)


class OptimizeError(Exception):
    pass


class InsufficientData(OptimizeError):
    pass


def huber(r: float, delta: float) -> float:
    """Huber cost of a residual norm: quadratic inside delta, linear outside."""
    if r < 0 or delta <= 0:
        raise OptimizeError("huber needs r >= 0 and delta > 0")
    if r <= delta:
        return 0.5 * r * r
    return delta * (r - 0.5 * delta)


def _huber_cost_weights(res: np.ndarray, delta: float):
    """Total robust cost and IRLS weights for stacked 2D residuals (N, 2)."""
    s = np.linalg.norm(res, axis=1)
    quad = s <= delta
    cost = float(np.where(quad, 0.5 * s * s, delta * (s - 0.5 * delta)).sum())
    with np.errstate(divide="ignore"):
        w = np.where(quad, 1.0, delta / np.maximum(s, 1e-300))
    return cost, w


def project_points(R: np.ndarray, t: np.ndarray, X: np.ndarray, cam: CameraModel):
    """Camera-frame transform + projection with per-point Jacobian wrt Y=RX+t.

    Returns (uv (N,2), Y (N,3), J_y (N,2,3), front (N,)). Points behind the
    camera get zeroed rows and front=False.
    """
    Y = X @ R.T + t
    z = Y[:, 2]
    front = z > 1e-12
    zs = np.where(front, z, 1.0)
    x = Y[:, 0] / zs
    y = Y[:, 1] / zs
    r2 = x * x + y * y
    radial = 1.0 + r2 * (cam.k1 + r2 * cam.k2)
    xy = x * y
    xd = x * radial + 2.0 * cam.p1 * xy + cam.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + cam.p1 * (r2 + 2.0 * y * y) + 2.0 * cam.p2 * xy
    uv = np.stack([cam.fx * xd + cam.cx, cam.fy * yd + cam.cy], axis=1)

    # distortion Jacobian wrt normalized coords
    dr = cam.k1 + 2.0 * cam.k2 * r2
    dxdx = radial + 2.0 * x * x * dr + 2.0 * cam.p1 * y + 6.0 * cam.p2 * x
    dxdy = 2.0 * xy * dr + 2.0 * cam.p1 * x + 2.0 * cam.p2 * y
    dydx = dxdy
    dydy = radial + 2.0 * y * y * dr + 6.0 * cam.p1 * y + 2.0 * cam.p2 * x

    # chain: d(uv)/dY = diag(fx, fy) @ D @ [[1/z, 0, -x/z], [0, 1/z, -y/z]]
    inv_z = 1.0 / zs
    J = np.empty((len(X), 2, 3))
    J[:, 0, 0] = cam.fx * dxdx * inv_z
    J[:, 0, 1] = cam.fx * dxdy * inv_z
    J[:, 0, 2] = cam.fx * (-dxdx * x - dxdy * y) * inv_z
    J[:, 1, 0] = cam.fy * dydx * inv_z
    J[:, 1, 1] = cam.fy * dydy * inv_z
    J[:, 1, 2] = cam.fy * (-dydx * x - dydy * y) * inv_z
    uv[~front] = 0.0
    J[~front] = 0.0
    return uv, Y, J, front


def _pose_jacobian(J_y: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """d(proj)/d(omega, nu) for a left-multiplicative pose increment."""
    n = len(Y)
    J = np.empty((n, 2, 6))
    # d(proj)/d(omega) = J_y @ (-[Y]x)
    J[:, :, 0] = J_y[:, :, 2] * Y[:, None, 1] - J_y[:, :, 1] * Y[:, None, 2]
    J[:, :, 1] = J_y[:, :, 0] * Y[:, None, 2] - J_y[:, :, 2] * Y[:, None, 0]
    J[:, :, 2] = J_y[:, :, 1] * Y[:, None, 0] - J_y[:, :, 0] * Y[:, None, 1]
    J[:, :, 3:] = J_y
    return J


def apply_pose_step(pose: Pose, delta: np.ndarray) -> Pose:
    """Left-multiplicative update: R <- exp(w) R, t <- exp(w) t + nu.

    One Newton polar-correction step keeps the rotation orthonormal to
    machine precision across long update chains.
    """
    Rd = rotation_exp(delta[:3])
    R = Rd @ pose.R
    R = 1.5 * R - 0.5 * (R @ R.T @ R)
    return Pose(R, Rd @ pose.t + delta[3:])


@dataclass
class PoseOptResult:
    pose: Pose
    inliers: np.ndarray
    cost: float
    improved: bool
    cost_trace: list


def pose_observation_residuals(pose: Pose, X, uv, inv_sigma, cam: CameraModel):
    """Normalized residuals r = (u - proj)/sigma and their pose Jacobian."""
    proj, Y, J_y, front = project_points(pose.R, pose.t, np.asarray(X, dtype=np.float64), cam)
    res = (np.asarray(uv, dtype=np.float64) - proj) * inv_sigma[:, None]
    J = -_pose_jacobian(J_y, Y) * inv_sigma[:, None, None]
    return res, J, front


def pose_optimize(
    initial: Pose,
    X,
    uv,
    levels,
    cam: CameraModel,
    scale_factor: float = 1.2,
    rounds: int = 4,
    iters: int = 10,
    chi2_thresh: float = CHI2_GATE,
    huber_delta: float = HUBER_DELTA,
) -> PoseOptResult:
    """Huber-robust 6-DoF refinement with inlier reclassification rounds.

    Observations behind the camera or outside the chi-square gate are dropped
    from the next round's active set but re-tested every round.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    levels = np.asarray(levels, dtype=np.int64).reshape(-1)
    n = len(X)
    if n < 4:
        raise InsufficientData(f"pose_optimize needs >= 4 observations, got {n}")
    inv_sigma = scale_factor ** (-levels.astype(np.float64))

    pose = initial
    active = np.ones(n, dtype=bool)
    cost_trace = []
    improved = False
    for _ in range(rounds):
        lam = 1e-4
        res, J, front = pose_observation_residuals(pose, X, uv, inv_sigma, cam)
        active = active & front
        if active.sum() < 4:
            break
        cost, w = _huber_cost_weights(res[active], huber_delta)
        trace = [cost]
        for _ in range(iters):
            Ja = J[active]
            ra = res[active]
            JW = Ja * w[:, None, None]
            H = np.einsum("nij,nik->jk", JW, Ja)
            g = np.einsum("nij,ni->j", JW, ra)
            accepted = False
            for _ in range(6):
                Hd = H + lam * np.diag(np.diag(H))
                try:
                    delta = np.linalg.solve(Hd, -g)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                cand = apply_pose_step(pose, delta)
                res_c, J_c, front_c = pose_observation_residuals(cand, X, uv, inv_sigma, cam)
                ok = active & front_c
                if ok.sum() < 4:
                    lam *= 10.0
                    continue
                cost_c, w_c = _huber_cost_weights(res_c[active & front_c], huber_delta)
                if cost_c <= cost and not np.any(active & ~front_c):
                    pose = cand
                    res, J = res_c, J_c
                    cost, w = cost_c, w_c
                    lam = max(lam / 3.0, 1e-10)
                    accepted = True
                    improved = True
                    trace.append(cost)
                    break
                lam *= 10.0
            if not accepted or (len(trace) > 1 and trace[-2] - trace[-1] < 1e-14 * max(trace[-2], 1.0)):
                break
        cost_trace.append(trace)
        chi2 = (res * res).sum(axis=1)
        _, _, front = pose_observation_residuals(pose, X, uv, inv_sigma, cam)
        active = front & (chi2 <= chi2_thresh)
    res, _, front = pose_observation_residuals(pose, X, uv, inv_sigma, cam)
    chi2 = (res * res).sum(axis=1)
    inliers = front & (chi2 <= chi2_thresh)
    final_cost = _huber_cost_weights(res[inliers], huber_delta)[0] if inliers.any() else 0.0
    return PoseOptResult(pose=pose, inliers=inliers, cost=final_cost, improved=improved, cost_trace=cost_trace)


class BundleProblem:
    """Joint keyframe/point refinement with Huber-robust reprojection cost.

    Poses are world-to-camera; ``fixed`` cameras are anchors excluded from the
    variable set (at least one camera must be fixed to pin the gauge).
    """

    def __init__(self, cam: CameraModel, huber_delta: float = HUBER_DELTA):
        self.cam = cam
        self.huber_delta = huber_delta
        self.poses: list[Pose] = []
        self.fixed: list[bool] = []
        self.points = np.zeros((0, 3))
        self._obs_cam = []
        self._obs_pt = []
        self._obs_uv = []
        self._obs_inv_sigma = []

    def add_camera(self, pose: Pose, fixed: bool) -> int:
        self.poses.append(pose)
        self.fixed.append(bool(fixed))
        return len(self.poses) - 1

    def set_points(self, pts: np.ndarray) -> None:
        self.points = np.asarray(pts, dtype=np.float64).reshape(-1, 3).copy()

    def add_observation(self, cam_idx: int, pt_idx: int, uv, inv_sigma: float) -> None:
        self._obs_cam.append(cam_idx)
        self._obs_pt.append(pt_idx)
        self._obs_uv.append((float(uv[0]), float(uv[1])))
        self._obs_inv_sigma.append(float(inv_sigma))

    def add_observations_bulk(self, cam_idx, pt_idx, uv, inv_sigma) -> None:
        self._obs_cam.extend(int(c) for c in cam_idx)
        self._obs_pt.extend(int(p) for p in pt_idx)
        self._obs_uv.extend((float(u), float(v)) for u, v in uv)
        self._obs_inv_sigma.extend(float(s) for s in inv_sigma)

    def _freeze(self):
        if getattr(self, "_frozen_n", -1) == len(self._obs_cam):
            return
        self._frozen_n = len(self._obs_cam)
        self.obs_cam = np.asarray(self._obs_cam, dtype=np.int64)
        self.obs_pt = np.asarray(self._obs_pt, dtype=np.int64)
        self.obs_uv = np.asarray(self._obs_uv, dtype=np.float64).reshape(-1, 2)
        self.obs_inv_sigma = np.asarray(self._obs_inv_sigma, dtype=np.float64)
        self.var_cam = np.array([-1 if f else 0 for f in self.fixed], dtype=np.int64)
        free = np.where(self.var_cam == 0)[0]
        self.var_cam[:] = -1
        self.var_cam[free] = np.arange(len(free))
        self.n_var_cams = len(free)
        self.free_cams = free
        # static Schur pair structure: observation pairs sharing a point,
        # both from variable cameras
        cam_var = self.var_cam[self.obs_cam]
        order = np.argsort(self.obs_pt, kind="stable")
        pts_sorted = self.obs_pt[order]
        starts = np.flatnonzero(np.concatenate([[True], pts_sorted[1:] != pts_sorted[:-1]]))
        ends = np.concatenate([starts[1:], [len(pts_sorted)]])
        pair_i, pair_j = [], []
        for s, e in zip(starts, ends):
            grp = order[s:e]
            grp = grp[cam_var[grp] >= 0]
            k = len(grp)
            if k == 0:
                continue
            pair_i.append(np.repeat(grp, k))
            pair_j.append(np.tile(grp, k))
        if pair_i:
            self._pair_i = np.concatenate(pair_i)
            self._pair_j = np.concatenate(pair_j)
        else:
            self._pair_i = np.zeros(0, dtype=np.int64)
            self._pair_j = np.zeros(0, dtype=np.int64)

    def residuals(self, poses=None, points=None, jacobians=True):
        """Stacked normalized residuals (M, 2) plus Jacobian blocks.

        Returns (res, Jc (M,2,6), Jp (M,2,3), front mask). Jc rows of fixed
        cameras are zero; pass jacobians=False for a cost-only evaluation
        (Jc and Jp come back as None).
        """
        self._freeze()
        poses = self.poses if poses is None else poses
        points = self.points if points is None else points
        M = len(self.obs_cam)
        res = np.zeros((M, 2))
        Jc = np.zeros((M, 2, 6)) if jacobians else None
        Jp = np.zeros((M, 2, 3)) if jacobians else None
        front = np.zeros(M, dtype=bool)
        for ci in range(len(poses)):
            sel = np.where(self.obs_cam == ci)[0]
            if len(sel) == 0:
                continue
            pose = poses[ci]
            X = points[self.obs_pt[sel]]
            proj, Y, J_y, fr = project_points(pose.R, pose.t, X, self.cam)
            isig = self.obs_inv_sigma[sel]
            res[sel] = (self.obs_uv[sel] - proj) * isig[:, None]
            if jacobians:
                if self.var_cam[ci] >= 0:
                    Jc[sel] = -_pose_jacobian(J_y, Y) * isig[:, None, None]
                Jp[sel] = -np.einsum("nij,jk->nik", J_y, pose.R) * isig[:, None, None]
            front[sel] = fr
        return res, Jc, Jp, front

    def robust_cost(self, poses=None, points=None) -> float:
        res, _, _, front = self.residuals(poses, points, jacobians=False)
        return _huber_cost_weights(res[front], self.huber_delta)[0]

    def chi2(self):
        res, _, _, front = self.residuals(jacobians=False)
        c = (res * res).sum(axis=1)
        c[~front] = np.inf
        return c

    # -- normal equations ---------------------------------------------------

    @staticmethod
    def _accumulate(indices, values, n):
        """Sum rows of ``values`` (M, ...) into ``n`` bins via bincount."""
        shape = values.shape[1:]
        flat = values.reshape(len(values), -1)
        out = np.empty((n, flat.shape[1]))
        for k in range(flat.shape[1]):
            out[:, k] = np.bincount(indices, weights=flat[:, k], minlength=n)
        return out.reshape((n,) + shape)

    def _system(self, res, Jc, Jp, front):
        """Robust-weighted blocks of the normal equations."""
        w = _huber_cost_weights(res, self.huber_delta)[1]
        w = np.where(front, w, 0.0)
        Jc_w = Jc * w[:, None, None]
        Jp_w = Jp * w[:, None, None]
        C, P = self.n_var_cams, len(self.points)
        cam_var = self.var_cam[self.obs_cam]
        has_cam = cam_var >= 0
        if C:
            U = self._accumulate(cam_var[has_cam],
                                 np.einsum("nij,nik->njk", Jc_w[has_cam], Jc[has_cam]), C)
            gc = self._accumulate(cam_var[has_cam],
                                  -np.einsum("nij,ni->nj", Jc_w[has_cam], res[has_cam]), C)
        else:
            U = np.zeros((0, 6, 6))
            gc = np.zeros((0, 6))
        V = self._accumulate(self.obs_pt, np.einsum("nij,nik->njk", Jp_w, Jp), P)
        gp = self._accumulate(self.obs_pt, -np.einsum("nij,ni->nj", Jp_w, res), P)
        W = np.einsum("nij,nik->njk", Jc_w, Jp)  # (M, 6, 3), zero rows for fixed cams
        return U, V, W, gc, gp

    def _damp(self, U, V, lam):
        Ud = U.copy()
        Vd = V.copy()
        for k in range(6):
            Ud[:, k, k] += lam * U[:, k, k]
        for k in range(3):
            Vd[:, k, k] += lam * V[:, k, k]
        # keep strictly positive diagonal so isolated blocks stay invertible
        for k in range(6):
            Ud[:, k, k] = np.maximum(Ud[:, k, k], 1e-12)
        for k in range(3):
            Vd[:, k, k] = np.maximum(Vd[:, k, k], 1e-12)
        return Ud, Vd

    def _linearize(self):
        res, Jc, Jp, front = self.residuals()
        return self._system(res, Jc, Jp, front)

    def solve_step(self, lam: float, use_schur: bool = True):
        """One damped GN step; identical linear system on both paths."""
        return self._solve_damped(self._linearize(), lam, use_schur)

    def _solve_damped(self, system, lam: float, use_schur: bool):
        U, V, W, gc, gp = system
        Ud, Vd = self._damp(U, V, lam)
        C, P = self.n_var_cams, len(self.points)
        if C == 0 and P == 0:
            raise OptimizeError("no variables")
        if use_schur:
            Vinv = np.linalg.inv(Vd)
            cam_var = self.var_cam[self.obs_cam]
            has_cam = cam_var >= 0
            A = np.einsum("nij,njk->nik", W, Vinv[self.obs_pt])  # (M, 6, 3)
            S = np.zeros((C, C, 6, 6))
            idx = np.arange(C)
            S[idx, idx] = Ud
            b = gc + self._accumulate(
                cam_var[has_cam],
                -np.einsum("nij,nj->ni", A[has_cam], gp[self.obs_pt[has_cam]]), C,
            )
            # pair contributions: observations of the same point from variable cams
            pi, pj = self._pair_i, self._pair_j
            if len(pi):
                contrib = np.einsum("nij,nkj->nik", A[pi], W[pj])
                key = cam_var[pi] * C + cam_var[pj]
                S -= self._accumulate(key, contrib, C * C).reshape(C, C, 6, 6)
            Sm = S.transpose(0, 2, 1, 3).reshape(6 * C, 6 * C)
            dc = np.linalg.solve(Sm, b.reshape(-1)).reshape(C, 6) if C else np.zeros((0, 6))
            # back-substitute points
            rhs = gp
            if C:
                rhs = gp + self._accumulate(
                    self.obs_pt[has_cam],
                    -np.einsum("nij,ni->nj", W[has_cam], dc[cam_var[has_cam]]), P,
                )
            dp = np.einsum("pij,pj->pi", Vinv, rhs)
            return dc, dp
        # dense reference: assemble the very same damped system
        nvar = 6 * C + 3 * P
        H = np.zeros((nvar, nvar))
        b = np.zeros(nvar)
        for ci in range(C):
            H[6 * ci : 6 * ci + 6, 6 * ci : 6 * ci + 6] = Ud[ci]
            b[6 * ci : 6 * ci + 6] = gc[ci]
        for p in range(P):
            o = 6 * C + 3 * p
            H[o : o + 3, o : o + 3] = Vd[p]
            b[o : o + 3] = gp[p]
        cam_var = self.var_cam[self.obs_cam]
        for m in range(len(self.obs_cam)):
            cv = cam_var[m]
            if cv < 0:
                continue
            p = self.obs_pt[m]
            ro = 6 * cv
            co = 6 * C + 3 * p
            H[ro : ro + 6, co : co + 3] += W[m]
            H[co : co + 3, ro : ro + 6] += W[m].T
        delta = np.linalg.solve(H, b)
        dc = delta[: 6 * C].reshape(C, 6)
        dp = delta[6 * C :].reshape(P, 3)
        return dc, dp

    def apply(self, dc, dp):
        for ci, vi in enumerate(self.var_cam):
            if vi >= 0:
                self.poses[ci] = apply_pose_step(self.poses[ci], dc[vi])
        self.points = self.points + dp

    def optimize(self, iters: int = 10, use_schur: bool = True, tol: float = 1e-9):
        """Damped GN loop; returns (final robust cost, cost trace, converged)."""
        self._freeze()
        if len(self.obs_cam) == 0:
            raise InsufficientData("no observations")
        lam = 1e-4
        cost = self.robust_cost()
        trace = [cost]
        for _ in range(iters):
            accepted = False
            system = self._linearize()
            for _ in range(6):
                poses_bak = list(self.poses)
                points_bak = self.points.copy()
                try:
                    dc, dp = self._solve_damped(system, lam, use_schur)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                self.apply(dc, dp)
                new_cost = self.robust_cost()
                if new_cost <= cost:
                    cost = new_cost
                    trace.append(cost)
                    lam = max(lam / 3.0, 1e-10)
                    accepted = True
                    break
                self.poses = poses_bak
                self.points = points_bak
                lam *= 10.0
            if not accepted:
                break
            if len(trace) > 1 and trace[-2] - trace[-1] < tol * max(1.0, trace[-2]):
                break
        return cost, trace, True
