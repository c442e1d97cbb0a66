# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Integer kernels match semislam.kernels._pure bit for
bit; float kernels agree to summation round-off."""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor, sqrt, fabs

cnp.import_array()

cdef extern from *:
    """
    static inline int popcount64(unsigned long long x) {
        return __builtin_popcountll(x);
    }
    """
    int popcount64(unsigned long long x) nogil


cdef inline int _popcount_bytes(const unsigned char* a, const unsigned char* b) nogil:
    cdef unsigned long long xa, xb
    cdef int total = 0
    cdef int k
    for k in range(4):
        xa = (<const unsigned long long*> a)[k]
        xb = (<const unsigned long long*> b)[k]
        total += popcount64(xa ^ xb)
    return total


def hamming_one(cnp.ndarray[cnp.uint8_t, ndim=1] query,
                cnp.ndarray[cnp.uint8_t, ndim=2] db):
    cdef Py_ssize_t n = db.shape[0]
    cdef cnp.ndarray[cnp.int32_t, ndim=1] out = np.zeros(n, dtype=np.int32)
    if n == 0:
        return out
    db = np.ascontiguousarray(db)
    query = np.ascontiguousarray(query)
    cdef const unsigned char* q = <const unsigned char*> cnp.PyArray_DATA(query)
    cdef const unsigned char* d = <const unsigned char*> cnp.PyArray_DATA(db)
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = _popcount_bytes(q, d + 32 * i)
    return out


def hamming_pairwise(cnp.ndarray[cnp.uint8_t, ndim=2] a,
                     cnp.ndarray[cnp.uint8_t, ndim=2] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    cdef cnp.ndarray[cnp.int32_t, ndim=2] out = np.zeros((n, m), dtype=np.int32)
    if n == 0 or m == 0:
        return out
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    cdef const unsigned char* pa = <const unsigned char*> cnp.PyArray_DATA(a)
    cdef const unsigned char* pb = <const unsigned char*> cnp.PyArray_DATA(b)
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = _popcount_bytes(pa + 32 * i, pb + 32 * j)
    return out


# circular FAST ring, radius 3, matches _pure.RING16
cdef int RING_DY[16]
cdef int RING_DX[16]
RING_DY[:] = [-3, -3, -2, -1, 0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3]
RING_DX[:] = [0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3, -3, -3, -2, -1]

cdef enum:
    ARC_LEN = 9


def fast_scores(cnp.ndarray[cnp.uint8_t, ndim=2] img, int threshold):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1]
    cdef cnp.ndarray[cnp.int32_t, ndim=2] out = np.zeros((H, W), dtype=np.int32)
    if H < 7 or W < 7:
        return out
    cdef int diffs[16]
    cdef int ext[24]
    cdef Py_ssize_t y, x
    cdef int k, j, c, m, best, s
    cdef int d0, d4, d8, d12
    cdef bint bright_possible, dark_possible
    with nogil:
        for y in range(3, H - 3):
            for x in range(3, W - 3):
                c = img[y, x]
                # safe compass reject: any 9-arc contains one of each opposite
                # pair, so a passing arc needs a passing pixel in both pairs
                d0 = <int> img[y + RING_DY[0], x + RING_DX[0]] - c
                d4 = <int> img[y + RING_DY[4], x + RING_DX[4]] - c
                d8 = <int> img[y + RING_DY[8], x + RING_DX[8]] - c
                d12 = <int> img[y + RING_DY[12], x + RING_DX[12]] - c
                bright_possible = (d0 > threshold or d8 > threshold) and (d4 > threshold or d12 > threshold)
                dark_possible = (d0 < -threshold or d8 < -threshold) and (d4 < -threshold or d12 < -threshold)
                if not bright_possible and not dark_possible:
                    continue
                for k in range(16):
                    diffs[k] = <int> img[y + RING_DY[k], x + RING_DX[k]] - c
                # bright arcs
                for k in range(16):
                    ext[k] = diffs[k]
                for k in range(ARC_LEN - 1):
                    ext[16 + k] = diffs[k]
                best = -1000
                for s in range(16):
                    m = ext[s]
                    for j in range(1, ARC_LEN):
                        if ext[s + j] < m:
                            m = ext[s + j]
                    if m > best:
                        best = m
                # dark arcs
                for k in range(16):
                    ext[k] = -diffs[k]
                for k in range(ARC_LEN - 1):
                    ext[16 + k] = -diffs[k]
                for s in range(16):
                    m = ext[s]
                    for j in range(1, ARC_LEN):
                        if ext[s + j] < m:
                            m = ext[s + j]
                    if m > best:
                        best = m
                if best > threshold:
                    out[y, x] = best
    return out


def nms3x3(cnp.ndarray[cnp.int32_t, ndim=2] score):
    cdef Py_ssize_t H = score.shape[0], W = score.shape[1]
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] keep = np.zeros((H, W), dtype=np.uint8)
    cdef Py_ssize_t y, x
    cdef int s
    cdef long long EDGE = -(2 ** 30)

    cdef cnp.ndarray[cnp.int32_t, ndim=2] pad = np.full((H + 2, W + 2), EDGE, dtype=np.int32)
    pad[1 : H + 1, 1 : W + 1] = score
    with nogil:
        for y in range(H):
            for x in range(W):
                s = pad[y + 1, x + 1]
                if s <= 0:
                    continue
                if (s > pad[y, x] and s > pad[y, x + 1] and s > pad[y, x + 2]
                        and s > pad[y + 1, x]
                        and s >= pad[y + 1, x + 2]
                        and s >= pad[y + 2, x] and s >= pad[y + 2, x + 1] and s >= pad[y + 2, x + 2]):
                    keep[y, x] = 1
    return keep.view(bool)


def orientation_moments(cnp.ndarray[cnp.uint8_t, ndim=2] img,
                        cnp.ndarray[cnp.int32_t, ndim=1] ys,
                        cnp.ndarray[cnp.int32_t, ndim=1] xs,
                        cnp.ndarray[cnp.int32_t, ndim=1] umax):
    cdef Py_ssize_t n = ys.shape[0]
    cdef int radius = umax.shape[0] - 1
    cdef cnp.ndarray[cnp.int64_t, ndim=1] m01 = np.zeros(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] m10 = np.zeros(n, dtype=np.int64)
    cdef Py_ssize_t i
    cdef int v, u, lim, y, x
    cdef long long s01, s10, val
    with nogil:
        for i in range(n):
            y = ys[i]
            x = xs[i]
            s01 = 0
            s10 = 0
            for v in range(-radius, radius + 1):
                lim = umax[v if v >= 0 else -v]
                for u in range(-lim, lim + 1):
                    val = img[y + v, x + u]
                    s01 += val * v
                    s10 += val * u
            m01[i] = s01
            m10[i] = s10
    return m01, m10


def box_sum2(cnp.ndarray[cnp.uint8_t, ndim=2] img, int radius):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] integral = np.zeros((H + 1, W + 1), dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] stage = np.zeros((H, W), dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] integral2 = np.zeros((H + 1, W + 1), dtype=np.int64)
    cdef cnp.ndarray[cnp.int32_t, ndim=2] out = np.zeros((H, W), dtype=np.int32)
    cdef Py_ssize_t y, x
    cdef long long acc
    cdef int y0, y1, x0, x1
    with nogil:
        for y in range(H):
            acc = 0
            for x in range(W):
                acc += img[y, x]
                integral[y + 1, x + 1] = integral[y, x + 1] + acc
        for y in range(H):
            y0 = <int> y - radius
            y1 = <int> y + radius + 1
            if y0 < 0: y0 = 0
            if y1 > H: y1 = <int> H
            for x in range(W):
                x0 = <int> x - radius
                x1 = <int> x + radius + 1
                if x0 < 0: x0 = 0
                if x1 > W: x1 = <int> W
                stage[y, x] = (integral[y1, x1] - integral[y0, x1]
                               - integral[y1, x0] + integral[y0, x0])
        for y in range(H):
            acc = 0
            for x in range(W):
                acc += stage[y, x]
                integral2[y + 1, x + 1] = integral2[y, x + 1] + acc
        for y in range(H):
            y0 = <int> y - radius
            y1 = <int> y + radius + 1
            if y0 < 0: y0 = 0
            if y1 > H: y1 = <int> H
            for x in range(W):
                x0 = <int> x - radius
                x1 = <int> x + radius + 1
                if x0 < 0: x0 = 0
                if x1 > W: x1 = <int> W
                out[y, x] = <int> (integral2[y1, x1] - integral2[y0, x1]
                                   - integral2[y1, x0] + integral2[y0, x0])
    return out


def brief_describe(cnp.ndarray[cnp.int32_t, ndim=2] sums,
                   cnp.ndarray[cnp.int32_t, ndim=1] ys,
                   cnp.ndarray[cnp.int32_t, ndim=1] xs,
                   cnp.ndarray[cnp.float64_t, ndim=1] coss,
                   cnp.ndarray[cnp.float64_t, ndim=1] sins,
                   cnp.ndarray[cnp.int32_t, ndim=2] pattern):
    cdef Py_ssize_t n = ys.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.zeros((n, 32), dtype=np.uint8)
    cdef Py_ssize_t i
    cdef int b, x1, y1, x2, y2, rx1, ry1, rx2, ry2, v1, v2, y, x
    cdef double c, s
    with nogil:
        for i in range(n):
            c = coss[i]
            s = sins[i]
            y = ys[i]
            x = xs[i]
            for b in range(256):
                x1 = pattern[b, 0]; y1 = pattern[b, 1]
                x2 = pattern[b, 2]; y2 = pattern[b, 3]
                rx1 = <int> floor(c * x1 - s * y1 + 0.5)
                ry1 = <int> floor(s * x1 + c * y1 + 0.5)
                rx2 = <int> floor(c * x2 - s * y2 + 0.5)
                ry2 = <int> floor(s * x2 + c * y2 + 0.5)
                v1 = sums[y + ry1, x + rx1]
                v2 = sums[y + ry2, x + rx2]
                if v1 < v2:
                    out[i, b >> 3] |= <unsigned char> (1 << (b & 7))
    return out


cdef inline double _bilinear_one(const double* img, Py_ssize_t H, Py_ssize_t W,
                                 double y, double x) nogil:
    cdef Py_ssize_t x0 = <Py_ssize_t> floor(x)
    cdef Py_ssize_t y0 = <Py_ssize_t> floor(y)
    if x0 < 0: x0 = 0
    if x0 > W - 2: x0 = W - 2
    if y0 < 0: y0 = 0
    if y0 > H - 2: y0 = H - 2
    cdef double fx = x - x0
    cdef double fy = y - y0
    cdef const double* row0 = img + y0 * W + x0
    cdef const double* row1 = row0 + W
    return (row0[0] * (1 - fx) * (1 - fy) + row0[1] * fx * (1 - fy)
            + row1[0] * (1 - fx) * fy + row1[1] * fx * fy)


def zncc_scan(cnp.ndarray[cnp.uint8_t, ndim=2] img,
              cnp.ndarray[cnp.float64_t, ndim=2] patch,
              cnp.ndarray[cnp.float64_t, ndim=1] us,
              cnp.ndarray[cnp.float64_t, ndim=1] vs):
    cdef Py_ssize_t m = us.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.full(m, -2.0)
    if m == 0:
        return out
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1]
    cdef Py_ssize_t ph = patch.shape[0], pw = patch.shape[1]
    cdef int hh = <int> (ph // 2), hw = <int> (pw // 2)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] fimg = img.astype(np.float64)
    cdef const double* ip = <const double*> cnp.PyArray_DATA(fimg)
    cdef double tmean = 0.0, tn = 0.0
    cdef Py_ssize_t i, j, k
    cdef double u, vcenter, gsum, gmean, gn, dot, gval, tz
    cdef cnp.ndarray[cnp.float64_t, ndim=1] tzarr = np.empty(ph * pw)
    for i in range(ph):
        for j in range(pw):
            tmean += patch[i, j]
    tmean /= (ph * pw)
    for i in range(ph):
        for j in range(pw):
            tz = patch[i, j] - tmean
            tzarr[i * pw + j] = tz
            tn += tz * tz
    tn = sqrt(tn)
    if tn < 1e-9:
        return out
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g = np.empty(ph * pw)
    with nogil:
        for k in range(m):
            u = us[k]
            vcenter = vs[k]
            if (u - hw < 0.0 or u + (pw - 1 - hw) > W - 1.0
                    or vcenter - hh < 0.0 or vcenter + (ph - 1 - hh) > H - 1.0):
                continue
            gsum = 0.0
            for i in range(ph):
                for j in range(pw):
                    gval = _bilinear_one(ip, H, W, vcenter + (i - hh), u + (j - hw))
                    g[i * pw + j] = gval
                    gsum += gval
            gmean = gsum / (ph * pw)
            gn = 0.0
            dot = 0.0
            for i in range(ph * pw):
                gval = g[i] - gmean
                gn += gval * gval
                dot += gval * tzarr[i]
            gn = sqrt(gn)
            if gn > 1e-9:
                out[k] = dot / (gn * tn)
    return out


def lk_track(prev_levels, next_levels, pts, int half_win=10, int iters=20, double eps=0.01):
    cdef Py_ssize_t n = len(pts)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p0 = np.asarray(pts, dtype=np.float64).reshape(-1, 2).copy()
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] status = np.ones(n, dtype=np.uint8)
    if n == 0:
        return p0, status
    cdef int L = len(prev_levels)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] flow = np.zeros((n, 2))
    cdef int win = 2 * half_win + 1
    cdef int big = win + 2
    cdef int wpix = win * win
    cdef cnp.ndarray[cnp.float64_t, ndim=1] patch = np.empty(big * big)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] tmpl = np.empty(wpix)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gx = np.empty(wpix)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gy = np.empty(wpix)
    cdef int lev, it, i, j
    cdef Py_ssize_t k, H, W
    cdef double scale, px, py, gxx, gxy, gyy, det, vx, vy, qx, qy
    cdef double bx, by, r, du, dv, lo
    cdef bint final, ok
    cdef cnp.ndarray[cnp.float64_t, ndim=2] prev_f, next_f
    cdef const double* pp
    cdef const double* np_
    for lev in range(L - 1, -1, -1):
        final = lev == 0
        prev_f = np.ascontiguousarray(prev_levels[lev], dtype=np.float64)
        next_f = np.ascontiguousarray(next_levels[lev], dtype=np.float64)
        H = prev_f.shape[0]
        W = prev_f.shape[1]
        pp = <const double*> cnp.PyArray_DATA(prev_f)
        np_ = <const double*> cnp.PyArray_DATA(next_f)
        scale = 2.0 ** lev
        lo = half_win + 2.0
        with nogil:
            for k in range(n):
                if status[k] == 0:
                    continue
                px = p0[k, 0] / scale
                py = p0[k, 1] / scale
                if not (lo <= px <= W - 1 - lo and lo <= py <= H - 1 - lo):
                    if final:
                        status[k] = 0
                    continue
                # one padded sample pass gives the template and its gradients
                for i in range(big):
                    for j in range(big):
                        patch[i * big + j] = _bilinear_one(
                            pp, H, W, py + (i - half_win - 1), px + (j - half_win - 1))
                gxx = 0.0; gxy = 0.0; gyy = 0.0
                for i in range(win):
                    for j in range(win):
                        tmpl[i * win + j] = patch[(i + 1) * big + (j + 1)]
                        du = 0.5 * (patch[(i + 1) * big + (j + 2)] - patch[(i + 1) * big + j])
                        dv = 0.5 * (patch[(i + 2) * big + (j + 1)] - patch[i * big + (j + 1)])
                        gx[i * win + j] = du
                        gy[i * win + j] = dv
                        gxx += du * du
                        gxy += du * dv
                        gyy += dv * dv
                det = gxx * gyy - gxy * gxy
                if det <= 1e-7:
                    if final:
                        status[k] = 0
                    continue
                vx = flow[k, 0]
                vy = flow[k, 1]
                ok = True
                for it in range(iters):
                    qx = px + vx
                    qy = py + vy
                    if not (half_win + 1 <= qx <= W - 2 - half_win and half_win + 1 <= qy <= H - 2 - half_win):
                        ok = False
                        break
                    bx = 0.0
                    by = 0.0
                    for i in range(win):
                        for j in range(win):
                            r = tmpl[i * win + j] - _bilinear_one(np_, H, W, qy + (i - half_win), qx + (j - half_win))
                            bx += gx[i * win + j] * r
                            by += gy[i * win + j] * r
                    du = (gyy * bx - gxy * by) / det
                    dv = (gxx * by - gxy * bx) / det
                    vx += du
                    vy += dv
                    if sqrt(du * du + dv * dv) < eps:
                        break
                if ok:
                    flow[k, 0] = vx
                    flow[k, 1] = vy
                elif final:
                    status[k] = 0
            if not final:
                for k in range(n):
                    flow[k, 0] *= 2.0
                    flow[k, 1] *= 2.0
    cdef cnp.ndarray[cnp.float64_t, ndim=2] tracked = p0 + flow
    return tracked, status


def match_regions(cnp.ndarray[cnp.float64_t, ndim=2] centers,
                  cnp.ndarray[cnp.float64_t, ndim=1] radii,
                  cnp.ndarray[cnp.int32_t, ndim=1] ref_levels,
                  cnp.ndarray[cnp.uint8_t, ndim=2] query_desc,
                  cnp.ndarray[cnp.float64_t, ndim=2] kp_xy,
                  cnp.ndarray[cnp.int32_t, ndim=1] kp_levels,
                  cnp.ndarray[cnp.uint8_t, ndim=2] kp_desc,
                  cnp.ndarray[cnp.int32_t, ndim=1] cell_start,
                  cnp.ndarray[cnp.int32_t, ndim=1] cell_items,
                  double cell_size, int cols, int rows,
                  int max_hamming, int level_slack):
    """Best in-radius keypoint per query under a level gate; ties to lower index."""
    cdef Py_ssize_t m = centers.shape[0]
    cdef cnp.ndarray[cnp.int32_t, ndim=1] best_idx = np.full(m, -1, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] best_dist = np.full(m, 2147483647, dtype=np.int32)
    if m == 0 or kp_xy.shape[0] == 0:
        return best_idx, best_dist
    query_desc = np.ascontiguousarray(query_desc)
    kp_desc = np.ascontiguousarray(kp_desc)
    cdef const unsigned char* qd = <const unsigned char*> cnp.PyArray_DATA(query_desc)
    cdef const unsigned char* kd = <const unsigned char*> cnp.PyArray_DATA(kp_desc)
    cdef Py_ssize_t i
    cdef int cx0, cx1, cy0, cy1, cx, cy, cell, s, e, t, idx, d, lv
    cdef double u, v, r, dx, dy
    with nogil:
        for i in range(m):
            u = centers[i, 0]
            v = centers[i, 1]
            r = radii[i]
            cx0 = <int> floor((u - r) / cell_size)
            cx1 = <int> floor((u + r) / cell_size)
            cy0 = <int> floor((v - r) / cell_size)
            cy1 = <int> floor((v + r) / cell_size)
            if cx0 < 0: cx0 = 0
            if cy0 < 0: cy0 = 0
            if cx1 > cols - 1: cx1 = cols - 1
            if cy1 > rows - 1: cy1 = rows - 1
            for cy in range(cy0, cy1 + 1):
                for cx in range(cx0, cx1 + 1):
                    cell = cy * cols + cx
                    s = cell_start[cell]
                    e = cell_start[cell + 1]
                    for t in range(s, e):
                        idx = cell_items[t]
                        lv = kp_levels[idx] - ref_levels[i]
                        if lv > level_slack or lv < -level_slack:
                            continue
                        dx = kp_xy[idx, 0] - u
                        dy = kp_xy[idx, 1] - v
                        if dx * dx + dy * dy > r * r:
                            continue
                        d = _popcount_bytes(qd + 32 * i, kd + 32 * idx)
                        if d > max_hamming:
                            continue
                        if d < best_dist[i] or (d == best_dist[i] and idx < best_idx[i]):
                            best_dist[i] = d
                            best_idx[i] = idx
    return best_idx, best_dist


cdef inline void _closest_on_tri(const double* p, const double* a, const double* b,
                                 const double* c, double* out) nogil:
    cdef double ab[3]
    cdef double ac[3]
    cdef double ap[3]
    cdef double bp[3]
    cdef double cp[3]
    cdef int k
    for k in range(3):
        ab[k] = b[k] - a[k]
        ac[k] = c[k] - a[k]
        ap[k] = p[k] - a[k]
        bp[k] = p[k] - b[k]
        cp[k] = p[k] - c[k]
    cdef double d1 = ab[0] * ap[0] + ab[1] * ap[1] + ab[2] * ap[2]
    cdef double d2 = ac[0] * ap[0] + ac[1] * ap[1] + ac[2] * ap[2]
    cdef double d3 = ab[0] * bp[0] + ab[1] * bp[1] + ab[2] * bp[2]
    cdef double d4 = ac[0] * bp[0] + ac[1] * bp[1] + ac[2] * bp[2]
    cdef double d5 = ab[0] * cp[0] + ab[1] * cp[1] + ab[2] * cp[2]
    cdef double d6 = ac[0] * cp[0] + ac[1] * cp[1] + ac[2] * cp[2]
    cdef double vc, vb, va, vv, ww, denom
    if d1 <= 0.0 and d2 <= 0.0:
        for k in range(3):
            out[k] = a[k]
        return
    if d3 >= 0.0 and d4 <= d3:
        for k in range(3):
            out[k] = b[k]
        return
    if d6 >= 0.0 and d5 <= d6:
        for k in range(3):
            out[k] = c[k]
        return
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        vv = d1 / (d1 - d3) if d1 - d3 != 0.0 else 0.0
        for k in range(3):
            out[k] = a[k] + vv * ab[k]
        return
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        ww = d2 / (d2 - d6) if d2 - d6 != 0.0 else 0.0
        for k in range(3):
            out[k] = a[k] + ww * ac[k]
        return
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
        denom = (d4 - d3) + (d5 - d6)
        ww = (d4 - d3) / denom if denom != 0.0 else 0.0
        for k in range(3):
            out[k] = b[k] + ww * (c[k] - b[k])
        return
    denom = va + vb + vc
    if denom != 0.0:
        vv = vb / denom
        ww = vc / denom
    else:
        vv = 0.0
        ww = 0.0
    for k in range(3):
        out[k] = a[k] + vv * ab[k] + ww * ac[k]


def bvh_closest(points, verts, faces, nodes_min, nodes_max, node_left, node_right,
                node_start, node_count, tri_order):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] P = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] V = np.ascontiguousarray(verts, dtype=np.float64)
    cdef cnp.ndarray[cnp.int32_t, ndim=2] F = np.ascontiguousarray(faces, dtype=np.int32)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] BMIN = np.ascontiguousarray(nodes_min, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] BMAX = np.ascontiguousarray(nodes_max, dtype=np.float64)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] NL = np.ascontiguousarray(node_left, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] NR = np.ascontiguousarray(node_right, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] NS = np.ascontiguousarray(node_start, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] NC = np.ascontiguousarray(node_count, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] ORD = np.ascontiguousarray(tri_order, dtype=np.int32)
    cdef Py_ssize_t n = P.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dist = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] closest = np.empty((n, 3))
    cdef cnp.ndarray[cnp.int32_t, ndim=1] tri_idx = np.empty(n, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] stack_arr = np.empty(4096, dtype=np.int32)
    cdef Py_ssize_t i
    cdef int top, node, l, rgt, s, cnt, t, tri, k, best_tri
    cdef double best, dl, dr, dd, d2
    cdef double pq[3]
    cdef double cp[3]
    cdef double best_pt[3]
    with nogil:
        for i in range(n):
            for k in range(3):
                pq[k] = P[i, k]
            best = 1e300
            best_tri = -1
            top = 0
            stack_arr[top] = 0
            top += 1
            while top > 0:
                top -= 1
                node = stack_arr[top]
                dd = 0.0
                for k in range(3):
                    dl = BMIN[node, k] - pq[k]
                    if dl < 0.0:
                        dl = pq[k] - BMAX[node, k]
                    if dl > 0.0:
                        dd += dl * dl
                if dd >= best:
                    continue
                if NL[node] < 0:
                    s = NS[node]
                    cnt = NC[node]
                    for t in range(s, s + cnt):
                        tri = ORD[t]
                        _closest_on_tri(pq,
                                        &V[F[tri, 0], 0],
                                        &V[F[tri, 1], 0],
                                        &V[F[tri, 2], 0], cp)
                        d2 = 0.0
                        for k in range(3):
                            dl = cp[k] - pq[k]
                            d2 += dl * dl
                        if d2 < best:
                            best = d2
                            best_tri = tri
                            for k in range(3):
                                best_pt[k] = cp[k]
                else:
                    l = NL[node]
                    rgt = NR[node]
                    dl = 0.0
                    dr = 0.0
                    for k in range(3):
                        dd = BMIN[l, k] - pq[k]
                        if dd < 0.0:
                            dd = pq[k] - BMAX[l, k]
                        if dd > 0.0:
                            dl += dd * dd
                        dd = BMIN[rgt, k] - pq[k]
                        if dd < 0.0:
                            dd = pq[k] - BMAX[rgt, k]
                        if dd > 0.0:
                            dr += dd * dd
                    if dl <= dr:
                        stack_arr[top] = rgt; top += 1
                        stack_arr[top] = l; top += 1
                    else:
                        stack_arr[top] = l; top += 1
                        stack_arr[top] = rgt; top += 1
            dist[i] = sqrt(best)
            tri_idx[i] = best_tri
            for k in range(3):
                closest[i, k] = best_pt[k]
    return dist, closest, tri_idx
