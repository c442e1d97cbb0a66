"""Pure numpy implementations of the hot kernels.

This backend is the portable fallback for `semislam.kernels._native`. Integer
kernels (corner scores, moments, descriptors, Hamming distances) produce
bit-identical results to the compiled backend; float kernels agree to
round-off (different summation orders).
"""

from __future__ import annotations

import numpy as np

POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

# circular FAST ring, radius 3, in (dy, dx), contiguous order
RING16 = np.array(
    [
        (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
        (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
    ],
    dtype=np.int32,
)
ARC_LEN = 9


def hamming_one(query: np.ndarray, db: np.ndarray) -> np.ndarray:
    """Hamming distance from one 32-byte descriptor to each row of db."""
    if db.size == 0:
        return np.zeros(0, dtype=np.int32)
    x = np.bitwise_xor(db, query[None, :])
    return POPCOUNT[x].sum(axis=1, dtype=np.int32)


def hamming_pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) Hamming distance table between two descriptor stacks."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.int32)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int32)
    # chunk rows to bound the (chunk, M, 32) intermediate
    step = max(1, int(4e6 // max(b.shape[0] * 32, 1)))
    for i in range(0, a.shape[0], step):
        x = np.bitwise_xor(a[i : i + step, None, :], b[None, :, :])
        out[i : i + step] = POPCOUNT[x].sum(axis=2, dtype=np.int32)
    return out


def fast_scores(img: np.ndarray, threshold: int) -> np.ndarray:
    """Segment-test corner score map.

    score[y, x] is the largest t for which the pixel still passes the
    16-ring/9-arc test; zero where the pixel fails at ``threshold``.
    """
    H, W = img.shape
    out = np.zeros((H, W), dtype=np.int32)
    if H < 7 or W < 7:
        return out
    center = img[3 : H - 3, 3 : W - 3].astype(np.int16)
    diffs = np.empty((16,) + center.shape, dtype=np.int16)
    for k, (dy, dx) in enumerate(RING16):
        diffs[k] = img[3 + dy : H - 3 + dy, 3 + dx : W - 3 + dx]
        diffs[k] -= center

    def arc_score(d):
        ext = np.concatenate([d, d[: ARC_LEN - 1]], axis=0)
        best = None
        for s in range(16):
            m = ext[s]
            for j in range(1, ARC_LEN):
                m = np.minimum(m, ext[s + j])
            best = m if best is None else np.maximum(best, m)
        return best

    score = np.maximum(arc_score(diffs), arc_score(-diffs)).astype(np.int32)
    score[score <= threshold] = 0
    out[3 : H - 3, 3 : W - 3] = score
    return out


def nms3x3(score: np.ndarray) -> np.ndarray:
    """Deterministic 3x3 non-max suppression; plateau ties go to scan order."""
    H, W = score.shape
    pad = np.pad(score, 1, constant_values=np.int32(-(2**30)))

    def nb(dy, dx):
        return pad[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]

    strict = (score > nb(-1, -1)) & (score > nb(-1, 0)) & (score > nb(-1, 1)) & (score > nb(0, -1))
    loose = (score >= nb(0, 1)) & (score >= nb(1, -1)) & (score >= nb(1, 0)) & (score >= nb(1, 1))
    return (score > 0) & strict & loose


def orientation_moments(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, umax: np.ndarray):
    """Intensity-centroid moments (m01, m10) over a circular patch."""
    n = len(ys)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    radius = len(umax) - 1
    offs = []
    for v in range(-radius, radius + 1):
        u = int(umax[abs(v)])
        for du in range(-u, u + 1):
            offs.append((v, du))
    offs = np.asarray(offs, dtype=np.int64)
    vals = img[ys[:, None] + offs[None, :, 0], xs[:, None] + offs[None, :, 1]].astype(np.int64)
    m01 = (vals * offs[None, :, 0]).sum(axis=1)
    m10 = (vals * offs[None, :, 1]).sum(axis=1)
    return m01, m10


def box_sum2(img: np.ndarray, radius: int) -> np.ndarray:
    """Two-pass zero-padded box sum; integer surrogate for a box blur."""
    a = _box_sum(img.astype(np.int64), radius)
    return _box_sum(a, radius).astype(np.int32)


def _box_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    H, W = arr.shape
    k = 2 * radius + 1
    padded = np.zeros((H + k, W + k), dtype=np.int64)
    padded[radius + 1 : radius + 1 + H, radius + 1 : radius + 1 + W] = arr
    c = padded.cumsum(axis=0).cumsum(axis=1)
    return (
        c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
    )[:H, :W]


def brief_describe(sums, ys, xs, coss, sins, pattern):
    """Rotated binary comparisons over the smoothed-intensity surrogate.

    ``pattern`` is int32 (256, 4) rows (x1, y1, x2, y2). Bit is 1 iff the
    first sample is strictly darker than the second (ties give 0).
    """
    n = len(ys)
    if n == 0:
        return np.zeros((0, 32), dtype=np.uint8)
    x1, y1, x2, y2 = (pattern[:, i].astype(np.float64) for i in range(4))
    c = coss[:, None]
    s = sins[:, None]
    rx1 = np.floor(c * x1 - s * y1 + 0.5).astype(np.int64)
    ry1 = np.floor(s * x1 + c * y1 + 0.5).astype(np.int64)
    rx2 = np.floor(c * x2 - s * y2 + 0.5).astype(np.int64)
    ry2 = np.floor(s * x2 + c * y2 + 0.5).astype(np.int64)
    v1 = sums[ys[:, None] + ry1, xs[:, None] + rx1]
    v2 = sums[ys[:, None] + ry2, xs[:, None] + rx2]
    bits = (v1 < v2).astype(np.uint8)
    return np.packbits(bits, axis=1, bitorder="little")


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear sampling; caller guarantees 0 <= x <= W-1, 0 <= y <= H-1."""
    H, W = img.shape
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, W - 2)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, H - 2)
    fx = xs - x0
    fy = ys - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    return (
        i00 * (1 - fx) * (1 - fy)
        + i01 * fx * (1 - fy)
        + i10 * (1 - fx) * fy
        + i11 * fx * fy
    )


def zncc_scan(img: np.ndarray, patch: np.ndarray, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """ZNCC of ``patch`` against bilinear windows centered at (us, vs).

    Out-of-image centers and zero-variance windows score -2.0.
    """
    m = len(us)
    if m == 0:
        return np.zeros(0)
    H, W = img.shape
    ph, pw = patch.shape
    hh, hw = ph // 2, pw // 2
    dy, dx = np.mgrid[-hh : ph - hh, -hw : pw - hw]
    dy = dy.ravel().astype(np.float64)
    dx = dx.ravel().astype(np.float64)
    ys = vs[:, None] + dy[None, :]
    xs = us[:, None] + dx[None, :]
    ok = (
        (xs.min(axis=1) >= 0.0)
        & (xs.max(axis=1) <= W - 1.0)
        & (ys.min(axis=1) >= 0.0)
        & (ys.max(axis=1) <= H - 1.0)
    )
    t = patch.astype(np.float64).ravel()
    tz = t - t.mean()
    tn = np.sqrt((tz * tz).sum())
    out = np.full(m, -2.0)
    if tn < 1e-9 or not ok.any():
        return out
    g = _bilinear(img.astype(np.float64), ys[ok], xs[ok])
    gz = g - g.mean(axis=1, keepdims=True)
    gn = np.sqrt((gz * gz).sum(axis=1))
    score = np.full(gz.shape[0], -2.0)
    nz = gn > 1e-9
    score[nz] = (gz[nz] @ tz) / (gn[nz] * tn)
    out[ok] = score
    return out


def extract_patch(img: np.ndarray, u: float, v: float, ph: int, pw: int):
    """Bilinear patch around a subpixel center; None when out of bounds."""
    H, W = img.shape
    hh, hw = ph // 2, pw // 2
    if not (hw <= u <= W - 1 - hw and hh <= v <= H - 1 - hh):
        return None
    dy, dx = np.mgrid[-hh : ph - hh, -hw : pw - hw]
    vals = _bilinear(img.astype(np.float64), v + dy.ravel(), u + dx.ravel())
    return vals.reshape(ph, pw)


def lk_track(prev_levels, next_levels, pts, half_win=10, iters=20, eps=0.01):
    """Pyramidal Lucas-Kanade, forward-additive, coarse to fine.

    Returns (tracked (N, 2) float64, status (N,) uint8). A point fails (status
    0) only when the finest level cannot process it: window out of image or a
    degenerate gradient matrix. Coarse-level failures just skip the level.
    """
    n = len(pts)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    status = np.ones(n, dtype=np.uint8)
    if n == 0:
        return pts.copy(), status
    L = len(prev_levels)
    flow = np.zeros((n, 2))
    win = 2 * half_win + 1
    dy, dx = np.mgrid[-half_win : half_win + 1, -half_win : half_win + 1]
    dyf = dy.ravel().astype(np.float64)
    dxf = dx.ravel().astype(np.float64)
    # gradient support needs one extra pixel
    gdy, gdx = np.mgrid[-half_win - 1 : half_win + 2, -half_win - 1 : half_win + 2]
    gdyf = gdy.ravel().astype(np.float64)
    gdxf = gdx.ravel().astype(np.float64)

    for lev in range(L - 1, -1, -1):
        final = lev == 0
        prev = prev_levels[lev].astype(np.float64)
        nxt = next_levels[lev].astype(np.float64)
        H, W = prev.shape
        p = pts / (2.0**lev)
        lo = half_win + 2.0
        inb = (
            (p[:, 0] >= lo) & (p[:, 0] <= W - 1 - lo) & (p[:, 1] >= lo) & (p[:, 1] <= H - 1 - lo)
        )
        alive = inb & (status > 0)
        if final:
            status[~inb] = 0
        if not alive.any():
            if not final:
                flow *= 2.0
            continue
        pa = p[alive]
        # template and gradients from the previous image
        big = _bilinear(prev, pa[:, 1, None] + gdyf[None, :], pa[:, 0, None] + gdxf[None, :])
        big = big.reshape(-1, win + 2, win + 2)
        tmpl = big[:, 1:-1, 1:-1].reshape(-1, win * win)
        gx = ((big[:, 1:-1, 2:] - big[:, 1:-1, :-2]) * 0.5).reshape(-1, win * win)
        gy = ((big[:, 2:, 1:-1] - big[:, :-2, 1:-1]) * 0.5).reshape(-1, win * win)
        gxx = (gx * gx).sum(axis=1)
        gxy = (gx * gy).sum(axis=1)
        gyy = (gy * gy).sum(axis=1)
        det = gxx * gyy - gxy * gxy
        good = det > 1e-7
        v = flow[alive].copy()
        active = good.copy()
        for _ in range(iters):
            if not active.any():
                break
            sel = np.where(active)[0]
            q = pa[sel] + v[sel]
            qin = (
                (q[:, 0] >= half_win + 1)
                & (q[:, 0] <= W - 2 - half_win)
                & (q[:, 1] >= half_win + 1)
                & (q[:, 1] <= H - 2 - half_win)
            )
            dead = sel[~qin]
            good[dead] = False
            active[dead] = False
            keep = sel[qin]
            if len(keep) == 0:
                break
            q = pa[keep] + v[keep]
            cur = _bilinear(nxt, q[:, 1, None] + dyf[None, :], q[:, 0, None] + dxf[None, :])
            r = tmpl[keep] - cur
            bx = (gx[keep] * r).sum(axis=1)
            by = (gy[keep] * r).sum(axis=1)
            d = det[keep]
            du = (gyy[keep] * bx - gxy[keep] * by) / d
            dv = (gxx[keep] * by - gxy[keep] * bx) / d
            v[keep, 0] += du
            v[keep, 1] += dv
            done = keep[np.hypot(du, dv) < eps]
            active[done] = False
        if final:
            sub = status[alive]
            sub[~good] = 0
            status[alive] = sub
        fa = flow[alive]
        fa[good] = v[good]
        flow[alive] = fa
        if not final:
            flow *= 2.0
    tracked = pts + flow
    return tracked, status


def match_regions(
    centers,
    radii,
    ref_levels,
    query_desc,
    kp_xy,
    kp_levels,
    kp_desc,
    cell_start,
    cell_items,
    cell_size,
    cols,
    rows,
    max_hamming,
    level_slack,
):
    """Best in-radius keypoint per query under a level gate; ties to lower index."""
    m = len(centers)
    best_idx = np.full(m, -1, dtype=np.int32)
    best_dist = np.full(m, np.iinfo(np.int32).max, dtype=np.int32)
    if m == 0 or len(kp_xy) == 0:
        return best_idx, best_dist
    for i in range(m):
        u, v = centers[i]
        r = radii[i]
        cx0 = max(int(np.floor((u - r) / cell_size)), 0)
        cx1 = min(int(np.floor((u + r) / cell_size)), cols - 1)
        cy0 = max(int(np.floor((v - r) / cell_size)), 0)
        cy1 = min(int(np.floor((v + r) / cell_size)), rows - 1)
        cand = []
        for cy in range(cy0, cy1 + 1):
            base = cy * cols
            for cx in range(cx0, cx1 + 1):
                s, e = cell_start[base + cx], cell_start[base + cx + 1]
                cand.extend(cell_items[s:e])
        if not cand:
            continue
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        ok = np.abs(kp_levels[cand] - ref_levels[i]) <= level_slack
        d2 = ((kp_xy[cand] - centers[i]) ** 2).sum(axis=1)
        ok &= d2 <= r * r
        cand = cand[ok]
        if len(cand) == 0:
            continue
        dists = hamming_one(query_desc[i], kp_desc[cand])
        j = int(np.argmin(dists))  # first minimum = lowest index (cand sorted)
        if dists[j] <= max_hamming:
            best_idx[i] = cand[j]
            best_dist[i] = dists[j]
    return best_idx, best_dist


def bvh_closest(points, verts, faces, nodes_min, nodes_max, node_left, node_right, node_start, node_count, tri_order):
    """Exact closest point on a triangle mesh for each query point.

    The pure backend walks the same BVH arrays as the compiled one but per
    point, pruning subtrees by box distance.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    dist = np.empty(n)
    closest = np.empty((n, 3))
    tri_idx = np.empty(n, dtype=np.int32)
    tri_a = verts[faces[:, 0]]
    tri_b = verts[faces[:, 1]]
    tri_c = verts[faces[:, 2]]
    for i in range(n):
        p = points[i]
        best = np.inf
        best_pt = None
        best_tri = -1
        stack = [0]
        while stack:
            node = stack.pop()
            lo = nodes_min[node]
            hi = nodes_max[node]
            d = np.maximum(np.maximum(lo - p, 0.0), p - hi)
            if d @ d >= best:
                continue
            if node_left[node] < 0:
                s, c = node_start[node], node_count[node]
                tris = tri_order[s : s + c]
                cp = point_triangle_closest(
                    np.broadcast_to(p, (len(tris), 3)), tri_a[tris], tri_b[tris], tri_c[tris]
                )
                d2 = ((cp - p) ** 2).sum(axis=1)
                j = int(np.argmin(d2))
                if d2[j] < best:
                    best = d2[j]
                    best_pt = cp[j]
                    best_tri = int(tris[j])
            else:
                l, r = node_left[node], node_right[node]
                dl = np.maximum(np.maximum(nodes_min[l] - p, 0.0), p - nodes_max[l])
                dr = np.maximum(np.maximum(nodes_min[r] - p, 0.0), p - nodes_max[r])
                if dl @ dl <= dr @ dr:
                    stack.append(r)
                    stack.append(l)
                else:
                    stack.append(l)
                    stack.append(r)
        dist[i] = np.sqrt(best)
        closest[i] = best_pt
        tri_idx[i] = best_tri
    return dist, closest, tri_idx


def point_triangle_closest(p, a, b, c):
    """Closest point on triangle for each row (vectorized Ericson region test)."""
    p = np.asarray(p, dtype=np.float64)
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        if m.any():
            out[m] = value[m] if value.ndim == 2 else value
            done[m] = True

    assign((d1 <= 0) & (d2 <= 0), a)  # vertex A
    assign((d3 >= 0) & (d4 <= d3), b)  # vertex B
    assign((d6 >= 0) & (d5 <= d6), c)  # vertex C

    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab)  # edge AB

    vb = d5 * d2 - d1 * d6
    with np.errstate(divide="ignore", invalid="ignore"):
        w_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac)  # edge AC

    va = d3 * d6 - d5 * d4
    denom_bc = (d4 - d3) + (d5 - d6)
    with np.errstate(divide="ignore", invalid="ignore"):
        w_bc = np.where(denom_bc != 0, (d4 - d3) / denom_bc, 0.0)
    assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + w_bc[:, None] * (c - b))  # edge BC

    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
    assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)  # interior
    return out
