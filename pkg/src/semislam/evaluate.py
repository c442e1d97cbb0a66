"""Map-accuracy evaluation against a reference triangle surface.

Point-to-mesh distances run through an AABB tree (bit-exact against the
brute-force all-triangles oracle); scale and roll against the surface are
recovered by brute-force grid search with per-candidate re-association and an
80%-trimmed RMSE, plus one local grid refinement around the winner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import Pose, rotation_about_axis


class EvalError(Exception):
    pass


class Mesh:
    """Triangle mesh with a lazily-built spatial index."""

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
        if len(self.faces) == 0:
            raise EvalError("mesh has no triangles")
        tri = self.vertices[self.faces]
        areas = 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )
        if (areas <= 0).any():
            raise EvalError("mesh contains degenerate triangles")
        self._areas = areas
        self._bvh = None

    @property
    def bvh(self):
        if self._bvh is None:
            self._bvh = kernels.build_bvh(self.vertices, self.faces)
        return self._bvh

    def closest(self, points):
        """(dist (N,), closest point (N,3), triangle index (N,)) per query."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return kernels.bvh_closest(pts, self.vertices, self.faces, *self.bvh)

    def sample_surface(self, n: int, seed: int = 0):
        """Uniform-by-area point sample (for synthetic evaluation oracles)."""
        rng = np.random.default_rng(np.random.PCG64(seed))
        probs = self._areas / self._areas.sum()
        idx = rng.choice(len(self.faces), size=n, p=probs)
        u = rng.random(n)
        v = rng.random(n)
        flip = u + v > 1
        u[flip] = 1 - u[flip]
        v[flip] = 1 - v[flip]
        tri = self.vertices[self.faces[idx]]
        return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def closest_point(p, mesh: Mesh):
    """Exact closest surface point: returns (point (3,), distance)."""
    d, cp, _ = mesh.closest(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return cp[0], float(d[0])


def brute_force_closest(points, mesh: Mesh, chunk: int = 2_000_000):
    """Independent all-triangles scan (oracle for the indexed query)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    F = len(mesh.faces)
    dist = np.empty(len(pts))
    closest = np.empty((len(pts), 3))
    rows = max(1, chunk // F)
    for s in range(0, len(pts), rows):
        block = pts[s : s + rows]
        n = len(block)
        P = np.repeat(block, F, axis=0)
        cp = kernels.point_triangle_closest(
            P, np.tile(a, (n, 1)), np.tile(b, (n, 1)), np.tile(c, (n, 1))
        )
        d2 = ((cp - P) ** 2).sum(axis=1).reshape(n, F)
        j = d2.argmin(axis=1)
        dist[s : s + rows] = np.sqrt(d2[np.arange(n), j])
        closest[s : s + rows] = cp.reshape(n, F, 3)[np.arange(n), j]
    return dist, closest


def save_mesh(path, vertices, faces) -> None:
    """ASCII mesh: 'v x y z' vertex lines then 'f i j k' 1-based face lines."""
    with open(path, "w", encoding="ascii") as fh:
        for v in np.asarray(vertices, dtype=np.float64).reshape(-1, 3):
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in np.asarray(faces, dtype=np.int64).reshape(-1, 3):
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_mesh(path) -> Mesh:
    verts = []
    faces = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v" and len(parts) == 4:
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f" and len(parts) == 4:
                faces.append([int(parts[1]) - 1, int(parts[2]) - 1, int(parts[3]) - 1])
            else:
                raise EvalError(f"{path}:{lineno}: unsupported mesh record")
    if not faces:
        raise EvalError(f"{path}: no faces")
    return Mesh(np.array(verts), np.array(faces, dtype=np.int32))


def trimmed_rmse(residuals, keep: float) -> float:
    """RMSE over the floor(keep*N) smallest residuals."""
    r = np.asarray(residuals, dtype=np.float64).reshape(-1)
    if len(r) == 0:
        raise EvalError("no residuals")
    if not (0 < keep <= 1):
        raise EvalError("keep fraction must be in (0, 1]")
    n_keep = int(math.floor(keep * len(r)))
    if n_keep < 1:
        raise EvalError("trim keeps no residuals")
    kept = np.sort(r)[:n_keep]
    return float(np.sqrt((kept * kept).mean()))


@dataclass
class AlignmentResult:
    lam: float
    theta_deg: float
    rmse: float
    residuals: np.ndarray
    kept_fraction: float
    coarse_lam: float = 0.0
    coarse_theta_deg: float = 0.0
    objective_trace: dict = field(default_factory=dict)


def _axis_matrix(axis, theta_deg: float) -> np.ndarray:
    return rotation_about_axis(axis, math.radians(theta_deg))


def align_scale_roll(points, mesh: Mesh, roll_axis, lam_grid, theta_grid_deg,
                     keep: float = 0.8, refine: bool = True) -> AlignmentResult:
    """Brute-force scale+roll registration of points onto the surface.

    Every (lambda, theta) candidate re-associates closest points on the mesh
    and scores the trimmed RMSE; the coarse winner is refined once on a local
    grid at a tenth of the step. Points and mesh must share a frame whose
    origin is the roll pivot; ``roll_axis`` is the roll direction there.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EvalError("no points to align")
    lam_grid = np.asarray(lam_grid, dtype=np.float64).reshape(-1)
    theta_grid = np.asarray(theta_grid_deg, dtype=np.float64).reshape(-1)
    if len(lam_grid) == 0 or len(theta_grid) == 0:
        raise EvalError("empty alignment grid")
    axis = np.asarray(roll_axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise EvalError("roll axis must be nonzero")
    axis = axis / n

    def objective(lam, theta):
        q = lam * (pts @ _axis_matrix(axis, theta).T)
        d, _, _ = mesh.closest(q)
        return trimmed_rmse(d, keep), d

    best = None
    for lam in lam_grid:
        for theta in theta_grid:
            val, _ = objective(float(lam), float(theta))
            if best is None or val < best[0]:
                best = (val, float(lam), float(theta))
    coarse_val, coarse_lam, coarse_theta = best

    lam_best, theta_best, val_best = coarse_lam, coarse_theta, coarse_val
    if refine:
        lam_ratio = (lam_grid[-1] / lam_grid[0]) ** (1.0 / max(len(lam_grid) - 1, 1)) if len(lam_grid) > 1 else 1.1
        lam_ratio = max(lam_ratio, 1.0 + 1e-9)
        theta_step = float(np.min(np.diff(np.sort(theta_grid)))) if len(theta_grid) > 1 else 1.0
        lam_local = coarse_lam * lam_ratio ** (np.arange(-10, 11) / 10.0)
        theta_local = coarse_theta + theta_step * (np.arange(-10, 11) / 10.0)
        for lam in lam_local:
            for theta in theta_local:
                val, _ = objective(float(lam), float(theta))
                if val < val_best:
                    val_best, lam_best, theta_best = val, float(lam), float(theta)
    _, residuals = objective(lam_best, theta_best)
    return AlignmentResult(
        lam=lam_best,
        theta_deg=theta_best,
        rmse=val_best,
        residuals=residuals,
        kept_fraction=keep,
        coarse_lam=coarse_lam,
        coarse_theta_deg=coarse_theta,
    )


def similarity_align(src, dst, with_scale: bool = True):
    """Closed-form similarity (s, R, t) minimizing ||dst - (s R src + t)||^2."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst) or len(src) < 2:
        raise EvalError("similarity alignment needs >= 2 paired points")
    ms = src.mean(axis=0)
    md = dst.mean(axis=0)
    sc = src - ms
    dc = dst - md
    cov = dc.T @ sc / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U) * np.linalg.det(Vt)))])
    R = U @ S @ Vt
    if with_scale:
        var = (sc * sc).sum() / len(src)
        s = float(np.trace(np.diag(D) @ S) / var) if var > 0 else 1.0
    else:
        s = 1.0
    t = md - s * R @ ms
    return s, R, t


def trajectory_error(est_ts, est_centers, gt_ts, gt_centers, align_scale: bool = True,
                     ts_tol: float = 1e-4):
    """Timestamp-matched ATE after closed-form similarity alignment.

    Returns (rmse, per-frame errors, (s, R, t)).
    """
    est_ts = np.asarray(est_ts, dtype=np.float64)
    gt_ts = np.asarray(gt_ts, dtype=np.float64)
    est_centers = np.asarray(est_centers, dtype=np.float64).reshape(-1, 3)
    gt_centers = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    j = np.searchsorted(gt_ts, est_ts)
    pairs_e, pairs_g = [], []
    for i, t in enumerate(est_ts):
        for cand in (j[i] - 1, j[i]):
            if 0 <= cand < len(gt_ts) and abs(gt_ts[cand] - t) <= ts_tol:
                pairs_e.append(i)
                pairs_g.append(cand)
                break
    if len(pairs_e) < 2:
        raise EvalError("fewer than 2 timestamp-matched pose pairs")
    e = est_centers[pairs_e]
    g = gt_centers[pairs_g]
    s, R, t = similarity_align(e, g, with_scale=align_scale)
    aligned = (s * (e @ R.T)) + t
    err = np.linalg.norm(aligned - g, axis=1)
    rmse = float(np.sqrt((err * err).mean()))
    return rmse, err, (s, R, t)


def pose_list_centers(poses):
    return np.array([p.center() for p in poses]).reshape(-1, 3)


def dominant_period(values, timestamps):
    """Dominant oscillation period of a detrended 1D signal via its spectrum."""
    v = np.asarray(values, dtype=np.float64)
    t = np.asarray(timestamps, dtype=np.float64)
    if len(v) < 8:
        raise EvalError("signal too short")
    dt = float(np.median(np.diff(t)))
    # remove linear trend, then the slow component with a wide moving average
    x = np.arange(len(v))
    coef = np.polyfit(x, v, 1)
    d = v - np.polyval(coef, x)
    win = max(len(v) // 8, 5)
    kernel = np.ones(win) / win
    trend = np.convolve(np.pad(d, (win // 2, win - 1 - win // 2), mode="edge"), kernel, mode="valid")
    d = d - trend
    spec = np.abs(np.fft.rfft(d * np.hanning(len(d))))
    freqs = np.fft.rfftfreq(len(d), dt)
    spec[0] = 0.0
    k = int(np.argmax(spec))
    if freqs[k] <= 0:
        raise EvalError("no dominant frequency")
    return 1.0 / float(freqs[k])
