"""Camera model, rigid poses, triangulation, parallax and epipolar sampling.

Conventions used across the package:

* ``Pose`` maps world coordinates into the camera frame: ``x_cam = R @ x_world + t``.
* Pixels are ``(u, v)`` with ``u`` along image columns, ``v`` along rows.
* The camera looks down its +z axis; points with ``z <= 0`` are behind it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CALIB_KEYS = ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2", "width", "height")


class GeometryError(Exception):
    pass


class TriangulationError(GeometryError):
    """Two-view triangulation was degenerate (parallel rays / identical poses)."""


class CalibrationFileError(GeometryError):
    pass


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with two radial and two tangential distortion terms."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def has_distortion(self) -> bool:
        return any(abs(c) > 0 for c in (self.k1, self.k2, self.p1, self.p2))

    def distort(self, xn):
        """Apply the distortion polynomial to normalized coordinates (..., 2)."""
        xn = np.asarray(xn, dtype=np.float64)
        x, y = xn[..., 0], xn[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + r2 * (self.k1 + r2 * self.k2)
        xy = x * y
        xd = x * radial + 2.0 * self.p1 * xy + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * xy
        return np.stack([xd, yd], axis=-1)

    def undistort(self, xd, iters: int = 10, tol: float = 1e-8):
        """Invert the distortion by fixed-point iteration.

        Returns (xn, ok). Pixels whose update is still above ``tol`` after
        ``iters`` rounds are flagged not-ok.
        """
        xd = np.asarray(xd, dtype=np.float64)
        xn = xd.copy()
        if not self.has_distortion:
            return xn, np.ones(xd.shape[:-1], dtype=bool)
        step = np.full(xd.shape[:-1], np.inf)
        for _ in range(iters):
            delta = self.distort(xn) - xn
            new = xd - delta
            step = np.linalg.norm(new - xn, axis=-1)
            xn = new
        return xn, step <= tol

    def pixel_to_normalized(self, px):
        px = np.asarray(px, dtype=np.float64)
        return np.stack(
            [(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy],
            axis=-1,
        )

    def normalized_to_pixel(self, xn):
        xn = np.asarray(xn, dtype=np.float64)
        return np.stack(
            [xn[..., 0] * self.fx + self.cx, xn[..., 1] * self.fy + self.cy],
            axis=-1,
        )

    def in_image(self, px, margin: float = 0.0):
        px = np.asarray(px, dtype=np.float64)
        return (
            (px[..., 0] >= -margin)
            & (px[..., 0] < self.width + margin)
            & (px[..., 1] >= -margin)
            & (px[..., 1] < self.height + margin)
        )


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-9 or np.linalg.det(R) < 0:
            raise GeometryError(f"rotation is not orthonormal (err={err:.3e})")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def transform(self, points):
        """World -> camera for one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """self @ other as transforms: (self.compose(other)).transform == self(other(x))."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def view_axis(self) -> np.ndarray:
        """Optical axis direction in world coordinates."""
        return self.R.T @ np.array([0.0, 0.0, 1.0])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def relative_to(self, other: "Pose") -> "Pose":
        """Transform taking ``other``'s camera frame into ``self``'s: self @ other^-1."""
        return self.compose(other.inverse())


def rotation_exp(w) -> np.ndarray:
    """Rodrigues: axis-angle vector (3,) to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = np.array(
        [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]], dtype=np.float64
    )
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    A = math.sin(theta) / theta
    B = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + A * K + B * (K @ K)


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise GeometryError("rotation axis must be nonzero")
    return rotation_exp(axis / n * angle_rad)


def quat_from_rotation(R) -> np.ndarray:
    """Rotation matrix to unit quaternion (qw, qx, qy, qz), qw >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_from_quat(q) -> np.ndarray:
    """Unit quaternion (qw, qx, qy, qz) to rotation matrix."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def project(p, pose: Pose, cam: CameraModel, margin: float = 0.0):
    """Project one world point. Returns pixel (2,) or None when out of view."""
    pc = pose.transform(np.asarray(p, dtype=np.float64))
    if pc[2] <= 0:
        return None
    xn = pc[:2] / pc[2]
    px = cam.normalized_to_pixel(cam.distort(xn))
    if not cam.in_image(px, margin):
        return None
    return px


def project_array(points, pose: Pose, cam: CameraModel, margin: float = 0.0):
    """Vectorized projection.

    Returns (uv (N,2), depth (N,), valid (N,)); uv rows of invalid entries are
    still filled with the unclipped projection (or 0 behind the camera).
    """
    pc = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    front = z > 0
    zsafe = np.where(front, z, 1.0)
    xn = pc[:, :2] / zsafe[:, None]
    uv = cam.normalized_to_pixel(cam.distort(xn))
    uv[~front] = 0.0
    valid = front & cam.in_image(uv, margin)
    return uv, z, valid


def unproject(px, cam: CameraModel) -> np.ndarray:
    """Pixel to unit ray in the camera frame. Raises on distortion-inversion failure."""
    xn, ok = cam.undistort(cam.pixel_to_normalized(np.asarray(px, dtype=np.float64)))
    if not np.all(ok):
        raise GeometryError(f"distortion inversion did not converge for pixel {px}")
    r = np.concatenate([xn, np.ones(xn.shape[:-1] + (1,))], axis=-1)
    return r / np.linalg.norm(r, axis=-1, keepdims=True)


def unproject_array(px, cam: CameraModel):
    """Vectorized unprojection: returns (rays (N,3) unit, ok (N,))."""
    xn, ok = cam.undistort(cam.pixel_to_normalized(np.asarray(px, dtype=np.float64).reshape(-1, 2)))
    r = np.concatenate([xn, np.ones((len(xn), 1))], axis=-1)
    return r / np.linalg.norm(r, axis=-1, keepdims=True), ok


def triangulate(px_a, pose_a: Pose, px_b, pose_b: Pose, cam: CameraModel) -> np.ndarray:
    """Linear two-view triangulation (homogeneous DLT on normalized rays)."""
    ra = unproject(px_a, cam)
    rb = unproject(px_b, cam)
    return triangulate_rays(ra, pose_a, rb, pose_b)


def triangulate_rays(ray_a, pose_a: Pose, ray_b, pose_b: Pose) -> np.ndarray:
    """DLT triangulation from camera-frame rays (z-normalized internally)."""
    A = np.empty((4, 4))
    for row, (ray, pose) in enumerate(((ray_a, pose_a), (ray_b, pose_b))):
        P = np.hstack([pose.R, pose.t[:, None]])
        x, y = ray[0] / ray[2], ray[1] / ray[2]
        A[2 * row] = x * P[2] - P[0]
        A[2 * row + 1] = y * P[2] - P[1]
    _, s, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-12 or s[2] < 1e-12 * s[0]:
        raise TriangulationError("degenerate two-view geometry")
    return X[:3] / X[3]


def parallax_deg(p, center_a, center_b) -> float:
    """Angle in degrees subtended at ``p`` by the two camera centers."""
    ra = np.asarray(center_a, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    rb = np.asarray(center_b, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    na, nb = np.linalg.norm(ra), np.linalg.norm(rb)
    if na == 0 or nb == 0:
        raise GeometryError("point coincides with a camera center")
    c = np.dot(ra, rb) / (na * nb)
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def parallax_deg_array(points, center_a, center_b) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ra = np.asarray(center_a, dtype=np.float64) - p
    rb = np.asarray(center_b, dtype=np.float64) - p
    denom = np.linalg.norm(ra, axis=1) * np.linalg.norm(rb, axis=1)
    c = np.einsum("ij,ij->i", ra, rb) / np.maximum(denom, 1e-300)
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def epipolar_segment(
    px,
    pose_a: Pose,
    pose_b: Pose,
    cam: CameraModel,
    depth_range,
    max_step_px: float = 0.7,
    margin: float = 0.0,
):
    """Sample the image-B locus of the ray through ``px`` over a depth range.

    Returns (pixels (M,2), depths (M,)) ordered from min to max depth, with
    adjacent in-image samples no further than ``max_step_px`` apart. Samples
    projecting out of image B (plus ``margin``) are dropped; the result may be
    empty.
    """
    dmin, dmax = float(depth_range[0]), float(depth_range[1])
    if not (dmin > 0 and dmin < dmax):
        raise GeometryError("depth range must satisfy 0 < min < max")
    ray = unproject(px, cam)
    rel = pose_b.compose(pose_a.inverse())  # camera A frame -> camera B frame

    def sample(inv_depths):
        d = 1.0 / inv_depths
        pc = (ray[None, :] * d[:, None]) @ rel.R.T + rel.t
        front = pc[:, 2] > 1e-12
        zs = np.where(front, pc[:, 2], 1.0)
        uv = cam.normalized_to_pixel(cam.distort(pc[:, :2] / zs[:, None]))
        return uv, front, d

    w0, w1 = 1.0 / dmax, 1.0 / dmin
    # estimate the polyline length from a coarse pass, then sample densely
    # enough (uniform in inverse depth is nearly uniform in the image)
    uv, front, _ = sample(np.linspace(w0, w1, 17))
    if not front.any():
        return np.empty((0, 2)), np.empty(0)
    d2 = np.linalg.norm(np.diff(uv, axis=0), axis=1)
    both = front[1:] & front[:-1]
    length = float(d2[both].sum())
    n = min(max(int(math.ceil(1.5 * length / max_step_px)) + 2, 17), 20000)
    for _ in range(4):
        uv, front, d = sample(np.linspace(w0, w1, n))
        inb = front & cam.in_image(uv, margin)
        steps = np.linalg.norm(np.diff(uv, axis=0), axis=1)
        adjacent = inb[1:] & inb[:-1]
        if not adjacent.any() or steps[adjacent].max() <= max_step_px or n >= 20000:
            break
        n = min(2 * n, 20000)
    if not inb.any():
        return np.empty((0, 2)), np.empty(0)
    pixels = uv[inb]
    depths = d[inb]
    order = np.argsort(depths, kind="stable")
    return pixels[order], depths[order]


def load_camera(path) -> CameraModel:
    """Read the plain-text key=value calibration format."""
    values = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CalibrationFileError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in CALIB_KEYS:
                raise CalibrationFileError(f"{path}:{lineno}: unknown key '{key}'")
            if key in values:
                raise CalibrationFileError(f"{path}:{lineno}: duplicate key '{key}'")
            try:
                values[key] = float(value.strip())
            except ValueError as exc:
                raise CalibrationFileError(f"{path}:{lineno}: bad number") from exc
    missing = [k for k in CALIB_KEYS if k not in values]
    if missing:
        raise CalibrationFileError(f"{path}: missing keys {missing}")
    values["width"] = int(values["width"])
    values["height"] = int(values["height"])
    try:
        return CameraModel(**values)
    except GeometryError as exc:
        raise CalibrationFileError(f"{path}: {exc}") from exc


def save_camera(path, cam: CameraModel) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for key in CALIB_KEYS:
            value = getattr(cam, key)
            fh.write(f"{key}={value}\n")
