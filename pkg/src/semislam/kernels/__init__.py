"""Hot-kernel backend selection.

Imports the compiled extension when present, otherwise falls back to the
numpy implementations. ``SEMISLAM_PURE=1`` forces the fallback. The selected
backend is reported in ``BACKEND`` ("native" or "pure").
"""

from __future__ import annotations

import importlib
import os

import numpy as np

from . import _pure

_native = None
if os.environ.get("SEMISLAM_PURE", "") in ("", "0"):
    try:
        _native = importlib.import_module("._native", __name__)
    except ImportError:
        _native = None

_impl = _native if _native is not None else _pure
BACKEND = "native" if _native is not None else "pure"

hamming_one = _impl.hamming_one
hamming_pairwise = _impl.hamming_pairwise
fast_scores = _impl.fast_scores
nms3x3 = _impl.nms3x3
orientation_moments = _impl.orientation_moments
box_sum2 = _impl.box_sum2
brief_describe = _impl.brief_describe
zncc_scan = _impl.zncc_scan
lk_track = _impl.lk_track
match_regions = _impl.match_regions
bvh_closest = _impl.bvh_closest

# shared (not performance critical, or used as independent reference)
POPCOUNT = _pure.POPCOUNT
RING16 = _pure.RING16
extract_patch = _pure.extract_patch
point_triangle_closest = _pure.point_triangle_closest
bilinear = _pure._bilinear


def native_available() -> bool:
    return _native is not None


def backends():
    """Importable backend modules, for equivalence tests and benchmarks."""
    out = {"pure": _pure}
    if _native is not None:
        out["native"] = _native
    return out


def build_bvh(verts: np.ndarray, faces: np.ndarray, leaf_size: int = 8):
    """Median-split AABB tree over triangles; plain arrays for both backends.

    Returns (nodes_min, nodes_max, left, right, start, count, tri_order).
    Internal nodes have left >= 0; leaves carry [start, start+count) ranges
    into tri_order.
    """
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int32)
    nf = len(faces)
    if nf == 0:
        raise ValueError("mesh has no triangles")
    tri_pts = verts[faces]  # (F, 3, 3)
    tri_min = tri_pts.min(axis=1)
    tri_max = tri_pts.max(axis=1)
    centroids = tri_pts.mean(axis=1)

    order = np.arange(nf, dtype=np.int32)
    nodes_min, nodes_max = [], []
    left, right, start, count = [], [], [], []
    # (node_index, lo, hi) ranges into order
    stack = [(0, 0, nf)]
    nodes_min.append(np.zeros(3))
    nodes_max.append(np.zeros(3))
    left.append(-1)
    right.append(-1)
    start.append(0)
    count.append(0)
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        nodes_min[node] = tri_min[idx].min(axis=0)
        nodes_max[node] = tri_max[idx].max(axis=0)
        if hi - lo <= leaf_size:
            left[node] = -1
            right[node] = -1
            start[node] = lo
            count[node] = hi - lo
            continue
        cen = centroids[idx]
        spread = cen.max(axis=0) - cen.min(axis=0)
        axis = int(np.argmax(spread))
        if spread[axis] <= 0:
            left[node] = -1
            right[node] = -1
            start[node] = lo
            count[node] = hi - lo
            continue
        perm = np.argsort(cen[:, axis], kind="stable")
        order[lo:hi] = idx[perm]
        mid = lo + (hi - lo) // 2
        for child_lo, child_hi, side in ((lo, mid, "l"), (mid, hi, "r")):
            child = len(nodes_min)
            nodes_min.append(np.zeros(3))
            nodes_max.append(np.zeros(3))
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            if side == "l":
                left[node] = child
            else:
                right[node] = child
            stack.append((child, child_lo, child_hi))
    return (
        np.asarray(nodes_min),
        np.asarray(nodes_max),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.asarray(start, dtype=np.int32),
        np.asarray(count, dtype=np.int32),
        order,
    )
