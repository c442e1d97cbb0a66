"""Multi-scale binary features.

Detection is a 16-pixel-ring segment test with per-pixel max-threshold scores,
3x3 non-max suppression and grid bucketing; orientation comes from the
intensity centroid of a radius-15 disc; descriptors are 256 rotated brightness
comparisons over a box-blurred image, with a hard-coded seeded pattern so the
bits are reproducible everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

BORDER = 16          # minimum keypoint distance to the level border
ORIENT_RADIUS = 15
PATTERN_RADIUS = 13  # comparison points live on a disc, rotation keeps them inside
PATTERN_SEED = 0x9E3779B97F4A7C15
DESC_BYTES = 32


class FeatureError(Exception):
    pass


@dataclass(frozen=True)
class Keypoint:
    """Detected corner in level-0 coordinates."""

    x: float
    y: float
    level: int
    orientation: float  # radians, [-pi, pi]
    response: float


class ImagePyramid:
    def __init__(self, levels, scale_factor):
        self.levels = levels
        self.scale_factor = float(scale_factor)
        self.n_levels = len(levels)
        self.scales = np.array([scale_factor**i for i in range(self.n_levels)])

    @property
    def width(self):
        return self.levels[0].shape[1]

    @property
    def height(self):
        return self.levels[0].shape[0]

    def to_level(self, xy, level):
        """Level-0 coordinates to level coordinates."""
        s = self.scales[level]
        return (np.asarray(xy, dtype=np.float64) + 0.5) / s - 0.5

    def to_level0(self, xy, level):
        s = self.scales[level]
        return (np.asarray(xy, dtype=np.float64) + 0.5) * s - 0.5


def _area_resize(img: np.ndarray, out_h: int, out_w: int, s: float) -> np.ndarray:
    """Deterministic area-average downsampling by exact factor ``s``.

    The image is piecewise constant, so fractional box sums are exact linear
    interpolations of the cumulative sums; the 2D box integral factorizes
    into two separable 1D passes.
    """
    H, W = img.shape
    xe = np.minimum(np.arange(out_w + 1) * s, W)
    ye = np.minimum(np.arange(out_h + 1) * s, H)

    Cx = np.zeros((H, W + 1))
    np.cumsum(img, axis=1, out=Cx[:, 1:])
    x0 = np.clip(np.floor(xe).astype(np.int64), 0, W - 1)
    fx = xe - x0
    Ix = Cx[:, x0] * (1 - fx) + Cx[:, x0 + 1] * fx
    Sx = np.diff(Ix, axis=1)          # (H, out_w) column-band sums

    Cy = np.zeros((H + 1, out_w))
    np.cumsum(Sx, axis=0, out=Cy[1:])
    y0 = np.clip(np.floor(ye).astype(np.int64), 0, H - 1)
    fy = (ye - y0)[:, None]
    Iy = Cy[y0] * (1 - fy) + Cy[y0 + 1] * fy
    total = np.diff(Iy, axis=0)       # (out_h, out_w) box sums

    area = np.diff(ye)[:, None] * np.diff(xe)[None, :]
    vals = np.floor(total / area + 0.5)
    return np.clip(vals, 0, 255).astype(np.uint8)


def build_pyramid(image: np.ndarray, n_levels: int = 8, scale_factor: float = 1.2) -> ImagePyramid:
    image = np.ascontiguousarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise FeatureError("expected a 2D uint8 grayscale image")
    if n_levels < 1:
        raise FeatureError("n_levels must be >= 1")
    if scale_factor <= 1.0:
        raise FeatureError("scale_factor must be > 1")
    if min(image.shape) < 2 * BORDER + 1:
        raise FeatureError("image too small for the descriptor patch")
    levels = [image]
    for i in range(1, n_levels):
        s = scale_factor**i
        h = int(math.floor(image.shape[0] / s))
        w = int(math.floor(image.shape[1] / s))
        if h < 7 or w < 7:
            break
        levels.append(_area_resize(image, h, w, s))
    return ImagePyramid(levels, scale_factor)


def _umax_table(radius: int = ORIENT_RADIUS) -> np.ndarray:
    v = np.arange(radius + 1, dtype=np.float64)
    return np.floor(np.sqrt(radius * radius - v * v) + 0.5).astype(np.int32)


UMAX = _umax_table()


def _make_pattern(seed: int = PATTERN_SEED, n: int = 256, radius: int = PATTERN_RADIUS) -> np.ndarray:
    """Seeded comparison-pair table, points uniform on the disc (LCG, no numpy RNG)."""
    mask = (1 << 64) - 1
    state = seed & mask

    def draw():
        nonlocal state
        state = (state * 6364136223846793005 + 1442695040888963407) & mask
        return int((state >> 33) % (2 * radius + 1)) - radius

    def point():
        while True:
            x, y = draw(), draw()
            if x * x + y * y <= radius * radius:
                return x, y

    rows = []
    while len(rows) < n:
        x1, y1 = point()
        x2, y2 = point()
        if (x1, y1) == (x2, y2):
            continue
        rows.append((x1, y1, x2, y2))
    return np.array(rows, dtype=np.int32)


PATTERN = _make_pattern()


def detect(pyramid: ImagePyramid, target_count: int = 1000, grid_cells=(10, 8), threshold: int = 7):
    """Segment-test corners bucketed over a grid; at most ``target_count`` kept."""
    if target_count < 1:
        raise FeatureError("target_count must be >= 1")
    cols, rows = grid_cells
    raw = []
    for level, img in enumerate(pyramid.levels):
        h, w = img.shape
        if min(h, w) < 2 * BORDER + 1:
            continue
        scores = kernels.fast_scores(img, threshold)
        scores[:BORDER] = 0
        scores[h - BORDER :] = 0
        scores[:, :BORDER] = 0
        scores[:, w - BORDER :] = 0
        keep = kernels.nms3x3(scores)
        ys, xs = np.nonzero(keep)
        if len(ys) == 0:
            continue
        raw.append((level, ys.astype(np.int32), xs.astype(np.int32), scores[ys, xs]))
    if not raw:
        return []

    w0, h0 = pyramid.width, pyramid.height
    cell_w = w0 / cols
    cell_h = h0 / rows
    a_cell, a_resp, a_level, a_y, a_x, a_x0, a_y0 = [], [], [], [], [], [], []
    for level, ys, xs, resp in raw:
        x0 = pyramid.to_level0(xs, level)
        y0 = pyramid.to_level0(ys, level)
        cx = np.clip((x0 / cell_w).astype(np.int64), 0, cols - 1)
        cy = np.clip((y0 / cell_h).astype(np.int64), 0, rows - 1)
        a_cell.append(cy * cols + cx)
        a_resp.append(resp.astype(np.int64))
        a_level.append(np.full(len(ys), level, dtype=np.int64))
        a_y.append(ys.astype(np.int64))
        a_x.append(xs.astype(np.int64))
        a_x0.append(x0)
        a_y0.append(y0)
    cell = np.concatenate(a_cell)
    resp = np.concatenate(a_resp)
    level = np.concatenate(a_level)
    yy = np.concatenate(a_y)
    xx = np.concatenate(a_x)
    xx0 = np.concatenate(a_x0)
    yy0 = np.concatenate(a_y0)

    # per-cell quota on (response desc, level, y, x) order, then a global cap
    order = np.lexsort((xx, yy, level, -resp, cell))
    cell_s = cell[order]
    first = np.concatenate([[True], cell_s[1:] != cell_s[:-1]])
    group_start = np.maximum.accumulate(np.where(first, np.arange(len(cell_s)), 0))
    rank = np.arange(len(cell_s)) - group_start
    quota = -(-target_count // (cols * rows))  # ceil
    picked = order[rank < quota]
    if len(picked) > target_count:
        sub = np.lexsort((xx[picked], yy[picked], level[picked], -resp[picked]))
        picked = picked[sub[:target_count]]

    # stable output order: level, then position at that level
    out_order = np.lexsort((xx[picked], yy[picked], level[picked]))
    picked = picked[out_order]
    kps = []
    for lv in np.unique(level[picked]):
        sel = picked[level[picked] == lv]
        ys32 = yy[sel].astype(np.int32)
        xs32 = xx[sel].astype(np.int32)
        m01, m10 = kernels.orientation_moments(pyramid.levels[lv], ys32, xs32, UMAX)
        angles = np.arctan2(m01.astype(np.float64), m10.astype(np.float64))
        for i, e in enumerate(sel):
            kps.append(
                Keypoint(x=float(xx0[e]), y=float(yy0[e]), level=int(lv),
                         orientation=float(angles[i]), response=float(resp[e]))
            )
    return kps


def describe(pyramid: ImagePyramid, keypoints, blur_radius: int = 2):
    """256-bit descriptors; returns (descriptors (N, 32), dropped indices).

    Keypoints closer than BORDER to their level edge cannot be described and
    are reported in ``dropped``; their descriptor rows are zero.
    """
    n = len(keypoints)
    desc = np.zeros((n, DESC_BYTES), dtype=np.uint8)
    dropped = []
    by_level = {}
    for i, kp in enumerate(keypoints):
        by_level.setdefault(kp.level, []).append(i)
    for level, idxs in sorted(by_level.items()):
        img = pyramid.levels[level]
        h, w = img.shape
        sums = kernels.box_sum2(img, blur_radius)
        xs, ys, cos_l, sin_l, kept = [], [], [], [], []
        for i in idxs:
            kp = keypoints[i]
            xl, yl = pyramid.to_level((kp.x, kp.y), level)
            xi = int(math.floor(xl + 0.5))
            yi = int(math.floor(yl + 0.5))
            if not (BORDER <= xi < w - BORDER and BORDER <= yi < h - BORDER):
                dropped.append(i)
                continue
            xs.append(xi)
            ys.append(yi)
            cos_l.append(math.cos(kp.orientation))
            sin_l.append(math.sin(kp.orientation))
            kept.append(i)
        if kept:
            d = kernels.brief_describe(
                sums,
                np.array(ys, dtype=np.int32),
                np.array(xs, dtype=np.int32),
                np.array(cos_l),
                np.array(sin_l),
                PATTERN,
            )
            desc[np.array(kept)] = d
    return desc, sorted(dropped)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Population count of XOR between two 256-bit descriptors."""
    return int(kernels.POPCOUNT[np.bitwise_xor(a, b)].sum())


def match_in_region(query, candidates, center, radius, max_hamming):
    """Minimum-Hamming candidate within ``radius`` of ``center``.

    ``candidates`` is a sequence of (Keypoint, descriptor). Returns
    (index, distance) of the best acceptable candidate or None; equal
    distances go to the lower index.
    """
    if radius <= 0:
        raise FeatureError("radius must be positive")
    cu, cv = float(center[0]), float(center[1])
    best = None
    for idx, (kp, d) in enumerate(candidates):
        if (kp.x - cu) ** 2 + (kp.y - cv) ** 2 > radius * radius:
            continue
        dist = hamming(query, d)
        if dist > max_hamming:
            continue
        if best is None or dist < best[1]:
            best = (idx, dist)
    return best


def zncc(patch_a, patch_b):
    """Zero-mean normalized cross-correlation; None for zero-variance input."""
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    if a.shape != b.shape:
        raise FeatureError("patch shapes differ")
    az = a - a.mean()
    bz = b - b.mean()
    na = math.sqrt((az * az).sum())
    nb = math.sqrt((bz * bz).sum())
    if na < 1e-12 or nb < 1e-12:
        return None
    return float((az * bz).sum() / (na * nb))


class FeatureGrid:
    """Spatial bucketing of keypoints for region matching."""

    def __init__(self, kp_xy: np.ndarray, width: int, height: int, cell_size: float = 24.0):
        self.cell_size = float(cell_size)
        self.cols = max(1, int(math.ceil(width / cell_size)))
        self.rows = max(1, int(math.ceil(height / cell_size)))
        n = len(kp_xy)
        if n == 0:
            self.cell_start = np.zeros(self.cols * self.rows + 1, dtype=np.int32)
            self.cell_items = np.zeros(0, dtype=np.int32)
            return
        cx = np.clip((kp_xy[:, 0] / cell_size).astype(np.int64), 0, self.cols - 1)
        cy = np.clip((kp_xy[:, 1] / cell_size).astype(np.int64), 0, self.rows - 1)
        cells = (cy * self.cols + cx).astype(np.int64)
        order = np.argsort(cells, kind="stable")
        counts = np.bincount(cells, minlength=self.cols * self.rows)
        self.cell_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self.cell_items = order.astype(np.int32)

    def match(self, centers, radii, ref_levels, query_desc, kp_xy, kp_levels, kp_desc, max_hamming, level_slack=1):
        return kernels.match_regions(
            np.ascontiguousarray(centers, dtype=np.float64),
            np.ascontiguousarray(radii, dtype=np.float64),
            np.ascontiguousarray(ref_levels, dtype=np.int32),
            np.ascontiguousarray(query_desc),
            np.ascontiguousarray(kp_xy, dtype=np.float64),
            np.ascontiguousarray(kp_levels, dtype=np.int32),
            np.ascontiguousarray(kp_desc),
            self.cell_start,
            self.cell_items,
            self.cell_size,
            self.cols,
            self.rows,
            int(max_hamming),
            int(level_slack),
        )


def build_flow_pyramid(image: np.ndarray, n_levels: int = 3):
    """Factor-2 mean pyramid (float32) for Lucas-Kanade tracking."""
    levels = [np.ascontiguousarray(image, dtype=np.float32)]
    for _ in range(1, n_levels):
        prev = levels[-1]
        h, w = prev.shape[0] & ~1, prev.shape[1] & ~1
        if h < 16 or w < 16:
            break
        nxt = prev[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3), dtype=np.float32)
        levels.append(nxt)
    return levels
