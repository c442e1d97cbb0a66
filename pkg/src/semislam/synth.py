"""Synthetic surfaces, trajectories and ray-cast rendering with ground truth.

Everything here is deterministic under its seed: textures come from a seeded
PCG64 value-noise stack, surfaces are analytic height fields (plane, dome,
smooth relief) with matching triangle meshes, and rendering intersects the
analytic surface so depth maps, meshes and poses stay mutually consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Pose, unproject_array


class SynthError(Exception):
    pass


# -- texture -------------------------------------------------------------------


def make_texture(size: int = 1024, seed: int = 0, octaves: int = 7,
                 contrast: float = 100.0, base: float = 128.0,
                 speckle_density: float = 2.5e-3) -> np.ndarray:
    """Seeded value-noise texture with a speckle layer, centred on ``base``.

    The noise stack gives smooth large-scale variation; the speckles (small
    bright/dark spots, think vasculature) carry the high-frequency structure.
    Output range is [base - contrast, base + contrast].
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    acc = np.zeros((size, size))
    amp = 1.0
    total = 0.0
    for o in range(octaves):
        res = min(2 ** (o + 3), size // 2)
        grid = rng.random((res + 1, res + 1))
        # smoothstep-interpolated lattice lookup
        xs = np.linspace(0, res, size, endpoint=False)
        x0 = np.floor(xs).astype(np.int64)
        f = xs - x0
        f = f * f * (3 - 2 * f)
        gx0 = grid[:, x0] * (1 - f) + grid[:, x0 + 1] * f
        g0 = gx0[x0, :]
        g1 = gx0[x0 + 1, :]
        vals = g0 * (1 - f[:, None]) + g1 * f[:, None]
        acc += amp * vals
        total += amp
        amp *= 0.7
    acc /= total
    acc = (acc - acc.min()) / max(acc.max() - acc.min(), 1e-12)
    acc = acc * 2.0 - 1.0

    n_speckles = int(speckle_density * size * size)
    if n_speckles:
        ys, xs = np.mgrid[0:size, 0:size]
        cx = rng.uniform(0, size, n_speckles)
        cy = rng.uniform(0, size, n_speckles)
        rad = rng.uniform(1.2, 4.0, n_speckles)
        mag = rng.uniform(0.35, 0.9, n_speckles) * rng.choice([-1.0, 1.0], n_speckles)
        for i in range(n_speckles):
            r = rad[i]
            x0i = max(int(cx[i] - 3 * r), 0)
            x1i = min(int(cx[i] + 3 * r) + 1, size)
            y0i = max(int(cy[i] - 3 * r), 0)
            y1i = min(int(cy[i] + 3 * r) + 1, size)
            dx = xs[y0i:y1i, x0i:x1i] - cx[i]
            dy = ys[y0i:y1i, x0i:x1i] - cy[i]
            acc[y0i:y1i, x0i:x1i] += mag[i] * np.exp(-(dx * dx + dy * dy) / (2 * (r * 0.6) ** 2))
    acc = np.clip(acc, -1.0, 1.0)
    tex = base + acc * contrast
    return np.clip(np.floor(tex + 0.5), 1, 254).astype(np.uint8)


# -- surfaces ------------------------------------------------------------------


@dataclass
class Surface:
    kind: str
    extent: float            # domain half-size is extent/2 (hemisphere: extent = radius)
    texture: np.ndarray
    vertices: np.ndarray
    faces: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def domain(self) -> float:
        """Half-width of the textured (x, y) domain."""
        return self.extent if self.kind == "hemisphere" else self.extent / 2.0

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "plane":
            return np.zeros_like(x)
        if self.kind == "hemisphere":
            r = self.extent
            return np.sqrt(np.maximum(r * r - x * x - y * y, 0.0))
        if self.kind == "relief":
            comps = self.params["components"]
            z = np.zeros_like(x)
            for a, fx, fy, ph in comps:
                z = z + a * np.cos(2 * math.pi * (fx * x + fy * y) + ph)
            return z
        raise SynthError(f"unknown surface kind {self.kind!r}")

    def sample_texture(self, x, y):
        """Bilinear texture lookup by world (x, y)."""
        S = self.texture.shape[0]
        d = self.domain
        u = (np.asarray(x) + d) / (2 * d) * (S - 1)
        v = (np.asarray(y) + d) / (2 * d) * (S - 1)
        u = np.clip(u, 0, S - 1)
        v = np.clip(v, 0, S - 1)
        u0 = np.clip(np.floor(u).astype(np.int64), 0, S - 2)
        v0 = np.clip(np.floor(v).astype(np.int64), 0, S - 2)
        fu = u - u0
        fv = v - v0
        t = self.texture.astype(np.float64)
        return (
            t[v0, u0] * (1 - fu) * (1 - fv)
            + t[v0, u0 + 1] * fu * (1 - fv)
            + t[v0 + 1, u0] * (1 - fu) * fv
            + t[v0 + 1, u0 + 1] * fu * fv
        )


def _grid_mesh(surface_kind_height, half: float, res: int):
    xs = np.linspace(-half, half, res + 1)
    ys = np.linspace(-half, half, res + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    Z = surface_kind_height(X, Y)
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    faces = []
    for i in range(res):
        for j in range(res):
            a = i * (res + 1) + j
            b = a + 1
            c = a + res + 1
            d = c + 1
            faces.append((a, b, c))
            faces.append((b, d, c))
    return verts, np.array(faces, dtype=np.int32)


def make_surface(kind: str, extent: float, seed: int = 0, contrast: float = 100.0,
                 texture_size: int = 1024, mesh_res: int = 96,
                 relief_amplitude: float | None = None) -> Surface:
    """Deterministic textured surface with a ground-truth triangle mesh."""
    if extent <= 0:
        raise SynthError("extent must be positive")
    tex = make_texture(texture_size, seed=seed, contrast=contrast)
    if kind == "plane":
        surf = Surface(kind, extent, tex, np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))
        v, f = _grid_mesh(surf.height, extent / 2.0, mesh_res)
        surf.vertices, surf.faces = v, f
        return surf
    if kind == "hemisphere":
        r = extent
        rings = max(mesh_res, 8)
        sectors = 2 * rings
        verts = [(0.0, 0.0, r)]
        for i in range(1, rings + 1):
            phi = (math.pi / 2) * i / rings
            for j in range(sectors):
                th = 2 * math.pi * j / sectors
                verts.append((r * math.sin(phi) * math.cos(th),
                              r * math.sin(phi) * math.sin(th),
                              r * math.cos(phi)))
        faces = []
        for j in range(sectors):
            faces.append((0, 1 + j, 1 + (j + 1) % sectors))
        for i in range(1, rings):
            base0 = 1 + (i - 1) * sectors
            base1 = 1 + i * sectors
            for j in range(sectors):
                j2 = (j + 1) % sectors
                faces.append((base0 + j, base1 + j, base1 + j2))
                faces.append((base0 + j, base1 + j2, base0 + j2))
        return Surface(kind, extent, tex, np.array(verts), np.array(faces, dtype=np.int32),
                       params={"radius": r})
    if kind == "relief":
        amp = relief_amplitude if relief_amplitude is not None else extent / 15.0
        rng = np.random.default_rng(np.random.PCG64(seed + 1))
        comps = []
        for j in range(5):
            a = amp / (j + 1)
            fx = rng.uniform(0.5, 2.5) / extent
            fy = rng.uniform(0.5, 2.5) / extent
            ph = rng.uniform(0, 2 * math.pi)
            comps.append((a, fx, fy, ph))
        surf = Surface(kind, extent, tex, np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32),
                       params={"components": comps, "amplitude": amp})
        v, f = _grid_mesh(surf.height, extent / 2.0, max(mesh_res, 128))
        surf.vertices, surf.faces = v, f
        return surf
    raise SynthError(f"unknown surface kind {kind!r}")


# -- trajectories ---------------------------------------------------------------


@dataclass
class Trajectory:
    poses: list            # world-to-camera Pose per frame
    timestamps: np.ndarray
    off_scene: np.ndarray  # bool per frame
    params: dict = field(default_factory=dict)


def look_at(center, target, up_hint=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at ``center`` looking at ``target``."""
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise SynthError("camera center coincides with target")
    z = z / nz
    up = np.asarray(up_hint, dtype=np.float64)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])
        x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R_cw = np.stack([x, y, z], axis=1)
    return Pose(R_cw.T, -R_cw.T @ c)


def _dir_from_angles(elev_deg: float, az_deg: float) -> np.ndarray:
    e = math.radians(elev_deg)
    a = math.radians(az_deg)
    return np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])


def make_trajectory(kind: str, n_frames: int, target=(0.0, 0.0, 0.0), distance: float = 250.0,
                    elev_deg: float = 55.0, az_start: float = -40.0, az_end: float = 40.0,
                    fps: float = 30.0, breathing_amp: float = 0.0, breathing_period: int = 60,
                    kidnap_away: int = 60, kidnap_return: int | None = None,
                    seed: int = 0) -> Trajectory:
    """Smooth camera paths aimed at the surface, with kidnap/breathing variants."""
    if n_frames < 2:
        raise SynthError("need at least 2 frames")
    target = np.asarray(target, dtype=np.float64)
    ts = np.arange(n_frames) / fps
    off = np.zeros(n_frames, dtype=bool)

    def arc_pose(i, n):
        az = az_start + (az_end - az_start) * (i / max(n - 1, 1))
        c = target + distance * _dir_from_angles(elev_deg, az)
        return look_at(c, target)

    if kind in ("arc", "orbit"):
        lo, hi = (az_start, az_end) if kind == "arc" else (0.0, 360.0 * (n_frames - 1) / n_frames)
        poses = []
        for i in range(n_frames):
            az = lo + (hi - lo) * (i / max(n_frames - 1, 1))
            poses.append(look_at(target + distance * _dir_from_angles(elev_deg, az), target))
        return Trajectory(poses, ts, off, {"kind": kind})

    if kind == "breathing":
        poses = []
        for i in range(n_frames):
            base = arc_pose(i, n_frames)
            c = base.center()
            view = base.view_axis()
            disp = breathing_amp * math.sin(2 * math.pi * i / breathing_period)
            c2 = c + disp * view
            poses.append(Pose(base.R, -base.R @ c2))
        return Trajectory(poses, ts, off, {"kind": kind, "period": breathing_period,
                                           "amplitude": breathing_amp})

    if kind == "kidnap":
        n_away = kidnap_away
        n_ret = kidnap_return if kidnap_return is not None else max(n_frames - n_away, 2) // 2
        n_map = n_frames - n_away - n_ret
        if n_map < 2 or n_ret < 1:
            raise SynthError("kidnap needs n_frames > kidnap_away + returns")
        poses = []
        for i in range(n_map):
            poses.append(arc_pose(i, n_map))
        for i in range(n_away):
            base = arc_pose(n_map - 1, n_map)
            c = base.center()
            # look straight away from the scene
            away_target = c + (c - target)
            poses.append(look_at(c, away_target))
            off[n_map + i] = True
        for i in range(n_ret):
            # retrace the mapped arc backwards
            poses.append(arc_pose(max(n_map - 1 - i, 0), n_map))
        return Trajectory(poses, ts, off, {"kind": kind, "n_map": n_map, "n_away": n_away,
                                           "n_return": n_ret})
    raise SynthError(f"unknown trajectory kind {kind!r}")


# -- rendering ------------------------------------------------------------------

_RAY_CACHE: dict = {}


def _camera_rays(cam: CameraModel) -> np.ndarray:
    """(H, W, 3) camera-frame ray directions with z = 1 (depth = ray parameter)."""
    key = cam
    rays = _RAY_CACHE.get(key)
    if rays is None:
        us, vs = np.meshgrid(np.arange(cam.width), np.arange(cam.height), indexing="xy")
        px = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
        dirs, ok = unproject_array(px, cam)
        if not ok.all():
            raise SynthError("camera distortion not invertible over the image")
        dirs = dirs / dirs[:, 2:3]
        rays = dirs.reshape(cam.height, cam.width, 3)
        _RAY_CACHE[key] = rays
    return rays


def render(surface: Surface, pose: Pose, cam: CameraModel):
    """Ray-cast grayscale view plus the aligned true-depth map.

    Depth is the camera-frame z of the hit; misses get depth inf and intensity
    0. Raises when the camera is at or below the surface.
    """
    C = pose.center()
    d = surface.domain
    if surface.kind == "hemisphere":
        if np.linalg.norm(C) <= surface.extent + 1e-9:
            raise SynthError("camera inside the surface")
    else:
        if abs(C[0]) <= d and abs(C[1]) <= d:
            if C[2] <= float(surface.height(C[0], C[1])) + 1e-9:
                raise SynthError("camera inside the surface")

    rays_cam = _camera_rays(cam)
    H, W, _ = rays_cam.shape
    R_wc = pose.R.T
    dirs = rays_cam.reshape(-1, 3) @ R_wc.T  # world directions, row per pixel
    t = np.full(H * W, np.inf)

    if surface.kind == "plane":
        dz = dirs[:, 2]
        valid = np.abs(dz) > 1e-12
        tc = np.where(valid, -C[2] / np.where(valid, dz, 1.0), np.inf)
        x = C[0] + tc * dirs[:, 0]
        y = C[1] + tc * dirs[:, 1]
        hit = valid & (tc > 1e-9) & (np.abs(x) <= d) & (np.abs(y) <= d)
        t[hit] = tc[hit]
    elif surface.kind == "hemisphere":
        r = surface.extent
        a = (dirs * dirs).sum(axis=1)
        b = 2.0 * dirs @ C
        c0 = C @ C - r * r
        disc = b * b - 4 * a * c0
        ok = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        for sign in (-1.0, 1.0):
            tc = (-b + sign * sq) / (2 * a)
            z = C[2] + tc * dirs[:, 2]
            good = ok & (tc > 1e-9) & (z >= -1e-9) & (tc < t)
            t[good] = tc[good]
    else:  # relief: march then bisect the height-field crossing
        amp = sum(abs(a) for a, *_ in surface.params["components"])
        dz = dirs[:, 2]
        going_down = dz < -1e-12
        t_hi = np.where(going_down, (amp * 1.01 - C[2]) / dz, np.inf)
        t_lo = np.where(going_down, (-amp * 1.01 - C[2]) / dz, np.inf)
        t_hi = np.maximum(t_hi, 1e-9)
        n_march = 64
        found = np.zeros(H * W, dtype=bool)
        ta = np.full(H * W, np.inf)
        tb = np.full(H * W, np.inf)
        prev_f = None
        prev_t = None
        for k in range(n_march + 1):
            tk = t_hi + (t_lo - t_hi) * (k / n_march)
            p = C[None, :] + tk[:, None] * dirs
            f = p[:, 2] - surface.height(p[:, 0], p[:, 1])
            if prev_f is not None:
                crossed = (~found) & going_down & (prev_f > 0) & (f <= 0)
                ta[crossed] = prev_t[crossed]
                tb[crossed] = tk[crossed]
                found |= crossed
            prev_f = f
            prev_t = tk
        for _ in range(40):
            tm = 0.5 * (ta + tb)
            p = C[None, :] + tm[:, None] * dirs
            f = p[:, 2] - surface.height(p[:, 0], p[:, 1])
            above = f > 0
            ta = np.where(found & above, tm, ta)
            tb = np.where(found & ~above, tm, tb)
        tc = 0.5 * (ta + tb)
        x = C[0] + tc * dirs[:, 0]
        y = C[1] + tc * dirs[:, 1]
        hit = found & (np.abs(x) <= d) & (np.abs(y) <= d)
        t[hit] = tc[hit]

    depth = t.reshape(H, W)
    img = np.zeros((H, W), dtype=np.uint8)
    hit = np.isfinite(t)
    if hit.any():
        p = C[None, :] + t[hit, None] * dirs[hit]
        vals = surface.sample_texture(p[:, 0], p[:, 1])
        img.reshape(-1)[hit] = np.clip(np.floor(vals + 0.5), 0, 255).astype(np.uint8)
    return img, depth


def paint_occluder(image: np.ndarray, center, angle_deg: float, length: float,
                   width: float, value: int = 12):
    """Composite a dark capsule (synthetic instrument) over the frame.

    Returns (image, mask). Zero-area parameters leave the image untouched.
    """
    img = image.copy()
    H, W = img.shape
    if length <= 0 or width <= 0:
        return img, np.zeros((H, W), dtype=bool)
    cu, cv = float(center[0]), float(center[1])
    a = math.radians(angle_deg)
    du, dv = math.cos(a), math.sin(a)
    us, vs = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64), indexing="xy")
    pu = us - cu
    pv = vs - cv
    s = np.clip(pu * du + pv * dv, -length / 2, length / 2)
    dist = np.hypot(pu - s * du, pv - s * dv)
    mask = dist <= width / 2
    shade = np.clip(value + 8.0 * dist / max(width / 2, 1.0), 0, 255)
    img[mask] = np.floor(shade[mask] + 0.5).astype(np.uint8)
    return img, mask


# -- dataset io -------------------------------------------------------------------


def write_pgm(path, img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 2:
        raise SynthError("write_pgm expects a 2D uint8 image")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise SynthError(f"{path}: not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise SynthError(f"{path}: unsupported maxval {maxval}")
    img = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if img.size != w * h:
        raise SynthError(f"{path}: truncated pixel data")
    return img.reshape(h, w).copy()


def write_dataset(out_dir, surface: Surface, trajectory: Trajectory, cam: CameraModel,
                  occluder_frames=None, occluder_params=None) -> None:
    """Standard dataset layout: frames, calib, ground truth, mesh, visibility.

    ``occluder_frames`` is an optional iterable of frame indices that get the
    synthetic instrument composited (with ``occluder_params`` kwargs).
    """
    import os

    from .evaluate import save_mesh
    from .tracking import save_trajectory

    os.makedirs(out_dir, exist_ok=True)
    occ = set(occluder_frames or ())
    vis_rows = []
    for i, pose in enumerate(trajectory.poses):
        img, depth = render(surface, pose, cam)
        frac = 0.0
        if i in occ:
            kw = dict(center=(cam.width / 2, cam.height / 2), angle_deg=30.0,
                      length=cam.width * 0.6, width=cam.height * 0.25)
            kw.update(occluder_params or {})
            img, mask = paint_occluder(img, **kw)
            frac = float(mask.mean())
        write_pgm(os.path.join(out_dir, f"frame_{i:06d}.pgm"), img)
        in_scene = 0 if trajectory.off_scene[i] else 1
        vis_rows.append(f"{i},{in_scene},{frac:.4f}")
    from .geometry import save_camera

    save_camera(os.path.join(out_dir, "calib.txt"), cam)
    save_trajectory(os.path.join(out_dir, "groundtruth.txt"),
                    list(zip(trajectory.timestamps, trajectory.poses)))
    save_mesh(os.path.join(out_dir, "surface.obj"), surface.vertices, surface.faces)
    with open(os.path.join(out_dir, "visibility.csv"), "w", encoding="ascii") as fh:
        fh.write("frame,in_scene,occluded_fraction\n")
        fh.write("\n".join(vis_rows) + "\n")


@dataclass
class Dataset:
    frames: list
    timestamps: np.ndarray
    cam: CameraModel
    gt_timestamps: np.ndarray | None = None
    gt_poses: list | None = None
    surface_path: str | None = None
    visibility: np.ndarray | None = None


def load_dataset(path) -> Dataset:
    """Read the directory layout written by ``write_dataset``."""
    import glob
    import os

    from .geometry import load_camera
    from .tracking import load_trajectory

    calib = os.path.join(path, "calib.txt")
    if not os.path.isfile(calib):
        raise SynthError(f"{path}: missing calib.txt")
    cam = load_camera(calib)
    frames = sorted(glob.glob(os.path.join(path, "frame_*.pgm")))
    if not frames:
        raise SynthError(f"{path}: no frame_*.pgm files")
    gt_ts = None
    gt_poses = None
    gt_file = os.path.join(path, "groundtruth.txt")
    if os.path.isfile(gt_file):
        gt_ts, gt_poses = load_trajectory(gt_file)
    if gt_ts is not None and len(gt_ts) == len(frames):
        ts = np.asarray(gt_ts)
    else:
        ts = np.arange(len(frames)) / 30.0
    surface = os.path.join(path, "surface.obj")
    vis = None
    vis_file = os.path.join(path, "visibility.csv")
    if os.path.isfile(vis_file):
        rows = np.genfromtxt(vis_file, delimiter=",", skip_header=1)
        vis = np.atleast_2d(rows)
    return Dataset(
        frames=frames,
        timestamps=ts,
        cam=cam,
        gt_timestamps=gt_ts,
        gt_poses=gt_poses,
        surface_path=surface if os.path.isfile(surface) else None,
        visibility=vis,
    )
