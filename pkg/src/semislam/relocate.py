"""Place recognition and pose recovery from scratch.

A hierarchical binary-word vocabulary (k-way majority clustering under
Hamming distance) quantizes descriptors into words; keyframes live in an
inverted index queried with an L1 bag-of-words similarity and expanded into
covisibility groups. Pose recovery solves the three-point problem inside
RANSAC and refines with the Huber pose optimizer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import kernels
from .config import Config
from .geometry import CameraModel, Pose, unproject_array
from .optimize import InsufficientData, pose_optimize, project_points

VOCAB_MAGIC = b"SSVOC001"


class RelocateError(Exception):
    pass


# -- vocabulary -------------------------------------------------------------------


@dataclass
class Vocabulary:
    k: int
    L: int
    centers: np.ndarray       # (n_nodes, 32) uint8
    first_child: np.ndarray   # (n_nodes,) int32, -1 for leaves
    n_children: np.ndarray    # (n_nodes,) int32
    word_id: np.ndarray       # (n_nodes,) int32, -1 for internal nodes
    idf: np.ndarray           # (n_words,) float64

    @property
    def n_words(self) -> int:
        return len(self.idf)

    def words_of(self, descriptors: np.ndarray) -> np.ndarray:
        """Quantize each descriptor to its leaf word id (tree descent)."""
        n = len(descriptors)
        out = np.empty(n, dtype=np.int32)
        for i in range(n):
            node = 0
            while self.first_child[node] >= 0:
                fc = self.first_child[node]
                nc = self.n_children[node]
                d = kernels.hamming_one(descriptors[i], self.centers[fc : fc + nc])
                node = fc + int(np.argmin(d))
            out[i] = self.word_id[node]
        return out

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(VOCAB_MAGIC)
            fh.write(struct.pack("<4i", self.k, self.L, len(self.centers), self.n_words))
            fh.write(self.centers.tobytes())
            fh.write(self.first_child.astype("<i4").tobytes())
            fh.write(self.n_children.astype("<i4").tobytes())
            fh.write(self.word_id.astype("<i4").tobytes())
            fh.write(self.idf.astype("<f8").tobytes())

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path, "rb") as fh:
            magic = fh.read(len(VOCAB_MAGIC))
            if magic != VOCAB_MAGIC:
                raise RelocateError(f"{path}: not a vocabulary file")
            k, L, n_nodes, n_words = struct.unpack("<4i", fh.read(16))
            centers = np.frombuffer(fh.read(n_nodes * 32), dtype=np.uint8).reshape(n_nodes, 32).copy()
            first_child = np.frombuffer(fh.read(n_nodes * 4), dtype="<i4").astype(np.int32)
            n_children = np.frombuffer(fh.read(n_nodes * 4), dtype="<i4").astype(np.int32)
            word_id = np.frombuffer(fh.read(n_nodes * 4), dtype="<i4").astype(np.int32)
            idf = np.frombuffer(fh.read(n_words * 8), dtype="<f8").astype(np.float64)
        return Vocabulary(k, L, centers, first_child, n_children, word_id, idf)


def _majority_center(descs: np.ndarray) -> np.ndarray:
    """Bitwise majority vote; exact ties resolve to 0."""
    bits = np.unpackbits(descs, axis=1, bitorder="little")
    ones = bits.sum(axis=0, dtype=np.int64)
    maj = (2 * ones > len(descs)).astype(np.uint8)
    return np.packbits(maj, bitorder="little")


def _kmajority(descs: np.ndarray, k: int, rng, iters: int = 10):
    """k-way clustering under Hamming distance with majority-vote centers."""
    n = len(descs)
    k = min(k, n)
    seed_idx = np.sort(rng.choice(n, size=k, replace=False))
    centers = descs[seed_idx].copy()
    assign = None
    for _ in range(iters):
        D = kernels.hamming_pairwise(descs, centers)
        new_assign = D.argmin(axis=1)
        # refill empty clusters with the farthest member of the largest one
        for c in range(k):
            if not (new_assign == c).any():
                counts = np.bincount(new_assign, minlength=k)
                big = int(np.argmax(counts))
                members = np.where(new_assign == big)[0]
                far = members[int(np.argmax(D[members, big]))]
                new_assign[far] = c
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            sel = assign == c
            if sel.any():
                centers[c] = _majority_center(descs[sel])
    D = kernels.hamming_pairwise(descs, centers)
    assign = D.argmin(axis=1)
    return centers, assign


def train_vocabulary(corpus, k: int = 10, L: int = 4, seed: int = 0) -> Vocabulary:
    """Hierarchical k-majority tree over a descriptor corpus.

    ``corpus`` is either a (N, 32) array or a list of per-image arrays (the
    per-image grouping feeds the idf weights).
    """
    if isinstance(corpus, np.ndarray):
        images = [corpus]
    else:
        images = [np.asarray(c, dtype=np.uint8).reshape(-1, 32) for c in corpus]
    all_desc = np.concatenate([im for im in images if len(im)], axis=0) if images else np.zeros((0, 32), np.uint8)
    if len(all_desc) == 0:
        raise RelocateError("empty descriptor corpus")
    rng = np.random.default_rng(np.random.PCG64(seed))

    centers = [np.zeros(32, dtype=np.uint8)]
    first_child = [-1]
    n_children = [0]
    word_id = [-1]
    centers[0] = _majority_center(all_desc)

    next_word = 0
    # BFS split; (node, member indices, depth)
    queue = [(0, np.arange(len(all_desc)), 0)]
    while queue:
        node, members, depth = queue.pop(0)
        if depth >= L or len(members) <= 1 or len(np.unique(all_desc[members], axis=0)) < 2:
            word_id[node] = next_word
            next_word += 1
            continue
        sub = all_desc[members]
        ck, assign = _kmajority(sub, k, rng)
        groups = [members[assign == c] for c in range(len(ck))]
        # drop empty children (can happen when duplicates collapse)
        keep = [(ck[c], groups[c]) for c in range(len(ck)) if len(groups[c])]
        if len(keep) < 2:
            word_id[node] = next_word
            next_word += 1
            continue
        fc = len(centers)
        first_child[node] = fc
        n_children[node] = len(keep)
        for cc, grp in keep:
            centers.append(cc.copy())
            first_child.append(-1)
            n_children.append(0)
            word_id.append(-1)
        for j, (cc, grp) in enumerate(keep):
            queue.append((fc + j, grp, depth + 1))

    vocab = Vocabulary(
        k=k,
        L=L,
        centers=np.array(centers, dtype=np.uint8),
        first_child=np.array(first_child, dtype=np.int32),
        n_children=np.array(n_children, dtype=np.int32),
        word_id=np.array(word_id, dtype=np.int32),
        idf=np.zeros(next_word),
    )
    # idf from per-image word occurrence
    n_images = len([im for im in images if len(im)])
    occur = np.zeros(next_word, dtype=np.int64)
    for im in images:
        if len(im) == 0:
            continue
        for w in np.unique(vocab.words_of(im)):
            occur[w] += 1
    with np.errstate(divide="ignore"):
        idf = np.where(occur > 0, np.log(np.maximum(n_images, 1) / np.maximum(occur, 1)), 0.0)
    # a word present in every image still carries a small weight
    idf = np.maximum(idf, 1e-3)
    idf[occur == 0] = 0.0
    vocab.idf = idf
    return vocab


def bow_vector(descriptors: np.ndarray, vocab: Vocabulary) -> dict:
    """Sparse tf-idf vector (word -> weight), L1-normalized."""
    if len(descriptors) == 0:
        return {}
    words = vocab.words_of(np.asarray(descriptors, dtype=np.uint8).reshape(-1, 32))
    counts = np.bincount(words, minlength=vocab.n_words).astype(np.float64)
    tf = counts / counts.sum()
    weights = tf * vocab.idf
    total = weights.sum()
    if total <= 0:
        return {}
    out = {}
    for w in np.nonzero(weights)[0]:
        out[int(w)] = float(weights[w] / total)
    return out


def bow_similarity(a: dict, b: dict) -> float:
    """s(a, b) = 1 - 0.5 * L1(a, b) = sum of min over common words."""
    if len(b) < len(a):
        a, b = b, a
    return float(sum(min(v, b[w]) for w, v in a.items() if w in b))


class KeyframeDatabase:
    """Inverted index word -> {keyframe: weight}."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.index: dict[int, dict[int, float]] = {}
        self.bows: dict[int, dict] = {}

    def add(self, kf_id: int, bow: dict) -> None:
        self.bows[kf_id] = bow
        for w, v in bow.items():
            self.index.setdefault(w, {})[kf_id] = v

    def remove(self, kf_id: int) -> None:
        bow = self.bows.pop(kf_id, None)
        if bow is None:
            return
        for w in bow:
            m = self.index.get(w)
            if m is not None:
                m.pop(kf_id, None)
                if not m:
                    del self.index[w]

    def query(self, bow: dict, min_common_words: int = 1):
        """Keyframes sharing words, scored by L1 similarity; sorted desc, id asc."""
        common: dict[int, int] = {}
        score: dict[int, float] = {}
        for w, v in bow.items():
            for kf_id, dv in self.index.get(w, {}).items():
                common[kf_id] = common.get(kf_id, 0) + 1
                score[kf_id] = score.get(kf_id, 0.0) + min(v, dv)
        hits = [(kf_id, s) for kf_id, s in score.items() if common[kf_id] >= min_common_words]
        hits.sort(key=lambda kv: (-kv[1], kv[0]))
        return hits


def query_groups(db: KeyframeDatabase, bow: dict, wm, min_common_words: int = 1):
    """Expand scored keyframes into covisibility groups ranked by total score.

    Returns a list of (group kf ids sorted, accumulated score, best kf id).
    """
    hits = db.query(bow, min_common_words)
    if not hits:
        return []
    scores = dict(hits)
    groups = []
    seen = set()
    for kf_id, s in hits:
        if kf_id in seen or kf_id not in wm.keyframes:
            continue
        members = [kf_id] + [n for n in wm.covisible(kf_id, k=10) if n in scores]
        acc = sum(scores.get(mm, 0.0) for mm in members)
        seen.update(members)
        groups.append((sorted(members), acc, kf_id))
    groups.sort(key=lambda g: (-g[1], g[2]))
    return groups


# -- P3P -----------------------------------------------------------------------


def p3p(world_points, bearings) -> list:
    """Grunert's three-point pose: up to four solutions (R, t) world->camera.

    ``bearings`` are unit rays in the camera frame. Solutions reproject the
    three points exactly; disambiguation is the caller's job (RANSAC scoring).
    Raises on collinear world points.
    """
    P = np.asarray(world_points, dtype=np.float64).reshape(3, 3)
    f = np.asarray(bearings, dtype=np.float64).reshape(3, 3)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    cr = np.cross(P[1] - P[0], P[2] - P[0])
    area2 = np.linalg.norm(cr)
    scale = max(np.linalg.norm(P[1] - P[0]), np.linalg.norm(P[2] - P[0]))
    if area2 < 1e-12 * scale * scale:
        raise RelocateError("collinear world points")

    a = np.linalg.norm(P[1] - P[2])
    b = np.linalg.norm(P[0] - P[2])
    c = np.linalg.norm(P[0] - P[1])
    cos_alpha = float(f[1] @ f[2])
    cos_beta = float(f[0] @ f[2])
    cos_gamma = float(f[0] @ f[1])
    A = (a * a) / (b * b)
    B = (c * c) / (b * b)

    # two quadratics in u with v-dependent coefficients:
    #   u^2 + b1 u + c1(v) = 0   (from side c)
    #   u^2 + b2(v) u + c2(v) = 0 (from side a)
    b1 = np.array([-2.0 * cos_gamma])
    c1 = np.array([1.0 - B, 2.0 * B * cos_beta, -B])
    b2 = np.array([0.0, -2.0 * cos_alpha])
    c2 = np.array([-A, 2.0 * A * cos_beta, 1.0 - A])
    d = npoly.polysub(c2, c1)
    e = npoly.polysub(b1, b2)
    quartic = npoly.polyadd(
        npoly.polyadd(npoly.polymul(d, d), npoly.polymul(npoly.polymul(b1, d), e)),
        npoly.polymul(c1, npoly.polymul(e, e)),
    )
    roots = npoly.polyroots(quartic)
    solutions = []
    seen = []
    for v in roots:
        if abs(v.imag) > 1e-6:
            continue
        v = float(v.real)
        if v <= 0:
            continue
        ev = float(npoly.polyval(v, e))
        if abs(ev) < 1e-12:
            continue
        u = float(npoly.polyval(v, d) / ev)
        # joint Newton on the two side constraints pins (u, v) to full precision
        for _ in range(8):
            g1 = u * u + v * v - 2 * u * v * cos_alpha - A * (1 + v * v - 2 * v * cos_beta)
            g2 = 1 + u * u - 2 * u * cos_gamma - B * (1 + v * v - 2 * v * cos_beta)
            j11 = 2 * u - 2 * v * cos_alpha
            j12 = 2 * v - 2 * u * cos_alpha - 2 * A * v + 2 * A * cos_beta
            j21 = 2 * u - 2 * cos_gamma
            j22 = -2 * B * v + 2 * B * cos_beta
            det = j11 * j22 - j12 * j21
            if abs(det) < 1e-14:
                break
            du = (g1 * j22 - g2 * j12) / det
            dv = (g2 * j11 - g1 * j21) / det
            u -= du
            v -= dv
            if abs(du) + abs(dv) < 1e-15 * (abs(u) + abs(v) + 1.0):
                break
        if u <= 0 or v <= 0:
            continue
        if any(abs(u - pu) < 1e-9 and abs(v - pv) < 1e-9 for pu, pv in seen):
            continue
        denom = 1.0 + v * v - 2.0 * v * cos_beta
        if denom <= 1e-15:
            continue
        s1 = b / math.sqrt(denom)
        s2 = u * s1
        s3 = v * s1
        Y = np.stack([s1 * f[0], s2 * f[1], s3 * f[2]])
        R, t = _procrustes3(P, Y)
        # exactness: transformed points must sit on their bearings
        Yp = P @ R.T + t
        rays = Yp / np.linalg.norm(Yp, axis=1, keepdims=True)
        ang = np.linalg.norm(np.cross(rays, f), axis=1).max()
        if ang < 1e-10:
            solutions.append((R, t))
            seen.append((u, v))
    return solutions


def _procrustes3(X: np.ndarray, Y: np.ndarray):
    """Exact rigid transform Y = R X + t from three correspondences."""
    xm = X.mean(axis=0)
    ym = Y.mean(axis=0)
    H = (X - xm).T @ (Y - ym)
    U, _, Vt = np.linalg.svd(H)
    S = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(Vt.T @ U.T)))])
    R = Vt.T @ S @ U.T
    t = ym - R @ xm
    return R, t


# -- relocalization ----------------------------------------------------------------


@dataclass
class RelocResult:
    pose: Pose
    point_ids: np.ndarray
    kp_indices: np.ndarray
    inliers: np.ndarray
    group: list = field(default_factory=list)


def relocalize(frame, wm, db: KeyframeDatabase, vocab: Vocabulary, cam: CameraModel,
               cfg: Config):
    """Recover the camera pose of a lost frame via the keyframe database.

    Tries each candidate covisibility group in score order: descriptor
    putatives against the group's map points, P3P inside adaptive RANSAC with
    the chi-square inlier gate, then Huber refinement. None when every group
    fails.
    """
    r = cfg.relocate
    bow = bow_vector(frame.descriptors, vocab)
    if not bow:
        return None
    groups = query_groups(db, bow, wm, r.min_common_words)
    if not groups:
        return None
    rng = np.random.default_rng(np.random.PCG64(r.seed + frame.index))
    rays, rays_ok = unproject_array(frame.kp_xy, cam)
    scale = cfg.features.scale_factor

    for members, _, _ in groups[:5]:
        with wm.lock:
            pids = sorted({pid for kid in members if kid in wm.keyframes
                           for pid in wm.keyframes[kid].observed_points()})
            if len(pids) < 4:
                continue
            pos = np.array([wm.points[p].position for p in pids])
            desc = np.array([wm.points[p].descriptor for p in pids], dtype=np.uint8)
        pid_arr = np.array(pids, dtype=np.int64)

        # putative 2D-3D matches: nearest point descriptor per keypoint
        D = kernels.hamming_pairwise(frame.descriptors, desc)
        best = D.argmin(axis=1)
        dist = D[np.arange(len(best)), best]
        ok = (dist <= cfg.matching.max_hamming) & rays_ok
        kp_idx = np.where(ok)[0]
        if len(kp_idx) < 4:
            continue
        # one point keeps its best keypoint
        order = np.lexsort((kp_idx, dist[kp_idx], best[kp_idx]))
        kp_s = kp_idx[order]
        pt_s = best[kp_idx][order]
        first = np.concatenate([[True], pt_s[1:] != pt_s[:-1]])
        kp_s, pt_s = kp_s[first], pt_s[first]
        n = len(kp_s)
        if n < 4:
            continue
        X = pos[pt_s]
        uv = frame.kp_xy[kp_s]
        lev = frame.kp_levels[kp_s]
        inv_sig2 = scale ** (-2.0 * lev.astype(np.float64))
        bearings = rays[kp_s]

        best_inl = None
        best_pose = None
        best_count = 0
        max_iters = r.ransac_max_iters
        it = 0
        while it < max_iters:
            it += 1
            sel = rng.choice(n, 3, replace=False)
            try:
                sols = p3p(X[sel], bearings[sel])
            except RelocateError:
                continue
            for R, t in sols:
                uvp, _, _, front = project_points(R, t, X, cam)
                err2 = ((uvp - uv) ** 2).sum(axis=1) * inv_sig2
                inl = front & (err2 <= cfg.mapping.max_reproj_chi2)
                cgood = int(inl.sum())
                if cgood > best_count:
                    best_count = cgood
                    best_inl = inl
                    best_pose = Pose(R, t)
                    frac = cgood / n
                    if frac > 0:
                        denom = math.log(max(1e-12, 1.0 - frac**3))
                        if denom < 0:
                            need = int(math.log(1.0 - r.ransac_confidence) / denom) + 1
                            max_iters = min(max_iters, max(it, need))
        if best_inl is None or best_count < r.min_inliers:
            continue
        try:
            refined = pose_optimize(
                best_pose,
                X[best_inl], uv[best_inl], lev[best_inl], cam,
                scale_factor=scale,
                chi2_thresh=cfg.mapping.max_reproj_chi2,
            )
        except InsufficientData:
            continue
        # re-gate all putatives under the refined pose
        uvp, _, _, front = project_points(refined.pose.R, refined.pose.t, X, cam)
        err2 = ((uvp - uv) ** 2).sum(axis=1) * inv_sig2
        inl = front & (err2 <= cfg.mapping.max_reproj_chi2)
        if int(inl.sum()) < r.min_inliers:
            continue
        return RelocResult(
            pose=refined.pose,
            point_ids=pid_arr[pt_s],
            kp_indices=kp_s.astype(np.int64),
            inliers=inl,
            group=list(members),
        )
    return None
