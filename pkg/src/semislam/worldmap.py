"""Shared map store: keyframes, map points, covisibility, culling, export.

Concurrency contract: one writer (the mapper) mutates under ``map.lock``;
readers take the same lock only long enough to build array snapshots, so they
never observe half-applied mutations. Single-threaded pipelines simply call
everything inline.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, quat_from_rotation, rotation_from_quat
from .optimize import project_points

PROV_ORB = "O"
PROV_DENSE = "D"

MAP_MAGIC = "semislam map 1"


class MapError(Exception):
    pass


@dataclass
class Observation:
    uv: np.ndarray          # level-0 pixel
    level: int
    kp_index: int = -1      # -1 for patch-tracked (densified) observations


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    provenance: str
    ref_level: int = 0
    observations: dict = field(default_factory=dict)  # kf_id -> Observation
    found_count: int = 0
    visible_count: int = 0
    created_frame: int = 0
    mature: bool = False
    anchor_kf: int = -1
    anchor_patch: np.ndarray | None = None
    anchor_level: int = 0
    anchor_uv: np.ndarray | None = None


@dataclass
class KeyFrame:
    id: int
    frame_index: int
    timestamp: float
    pose: Pose
    kp_xy: np.ndarray        # (N, 2) level-0 coords
    kp_levels: np.ndarray    # (N,)
    descriptors: np.ndarray  # (N, 32)
    pyramid_levels: list     # uint8 images, kept for correlation matching
    bow: dict = field(default_factory=dict)
    point_for_kp: dict = field(default_factory=dict)   # kp_index -> point_id
    patch_points: set = field(default_factory=set)     # densified points seen here
    median_scene_depth: float = 1.0

    def observed_points(self):
        return set(self.point_for_kp.values()) | self.patch_points


class WorldMap:
    def __init__(self, scale_factor: float = 1.2):
        self.lock = threading.RLock()
        self.scale_factor = scale_factor
        self.keyframes: dict[int, KeyFrame] = {}
        self.points: dict[int, MapPoint] = {}
        self.covis: dict[int, dict[int, int]] = {}
        self._next_kf = 0
        self._next_pt = 0
        self._snapshot_cache = None
        self._semidense_cache = None

    def _dirty(self):
        self._snapshot_cache = None
        self._semidense_cache = None

    # -- mutation (mapper only) ---------------------------------------------

    def insert_keyframe(self, kf: KeyFrame) -> int:
        with self.lock:
            kf.id = self._next_kf
            self._next_kf += 1
            self.keyframes[kf.id] = kf
            self.covis[kf.id] = {}
            return kf.id

    def insert_point(self, mp: MapPoint) -> int:
        with self.lock:
            mp.id = self._next_pt
            self._next_pt += 1
            obs = mp.observations
            mp.observations = {}
            self.points[mp.id] = mp
            self._dirty()
            for kf_id, ob in obs.items():
                self.add_observation(mp.id, kf_id, ob)
            return mp.id

    def add_observation(self, point_id: int, kf_id: int, obs: Observation) -> None:
        with self.lock:
            if point_id not in self.points:
                raise MapError(f"unknown point {point_id}")
            if kf_id not in self.keyframes:
                raise MapError(f"unknown keyframe {kf_id}")
            mp = self.points[point_id]
            if kf_id in mp.observations:
                self.remove_observation(point_id, kf_id)
            kf = self.keyframes[kf_id]
            for other_id in mp.observations:
                self.covis[kf_id][other_id] = self.covis[kf_id].get(other_id, 0) + 1
                self.covis[other_id][kf_id] = self.covis[other_id].get(kf_id, 0) + 1
            mp.observations[kf_id] = obs
            if obs.kp_index >= 0:
                kf.point_for_kp[obs.kp_index] = point_id
            else:
                kf.patch_points.add(point_id)

    def remove_observation(self, point_id: int, kf_id: int) -> None:
        with self.lock:
            mp = self.points.get(point_id)
            if mp is None or kf_id not in mp.observations:
                return
            obs = mp.observations.pop(kf_id)
            kf = self.keyframes.get(kf_id)
            if kf is not None:
                if obs.kp_index >= 0:
                    kf.point_for_kp.pop(obs.kp_index, None)
                else:
                    kf.patch_points.discard(point_id)
            for other_id in mp.observations:
                for a, b in ((kf_id, other_id), (other_id, kf_id)):
                    m = self.covis.get(a)
                    if m is not None and b in m:
                        m[b] -= 1
                        if m[b] <= 0:
                            del m[b]

    def remove_point(self, point_id: int) -> None:
        with self.lock:
            mp = self.points.get(point_id)
            if mp is None:
                raise MapError(f"unknown point {point_id}")
            for kf_id in list(mp.observations):
                self.remove_observation(point_id, kf_id)
            del self.points[point_id]
            self._dirty()

    def remove_keyframe(self, kf_id: int) -> None:
        with self.lock:
            kf = self.keyframes.get(kf_id)
            if kf is None:
                raise MapError(f"unknown keyframe {kf_id}")
            for pid in list(kf.observed_points()):
                self.remove_observation(pid, kf_id)
            del self.keyframes[kf_id]
            for other in self.covis.pop(kf_id, {}):
                self.covis[other].pop(kf_id, None)

    def bump_counters(self, visible_ids, found_ids) -> None:
        with self.lock:
            for pid in visible_ids:
                mp = self.points.get(pid)
                if mp is not None:
                    mp.visible_count += 1
            for pid in found_ids:
                mp = self.points.get(pid)
                if mp is not None:
                    mp.found_count += 1

    # -- queries --------------------------------------------------------------

    def covisible(self, kf_id: int, k: int | None = None, min_weight: int = 1):
        """Neighbor keyframes by weight desc, id asc; top-k when k given."""
        with self.lock:
            if kf_id not in self.keyframes:
                raise MapError(f"unknown keyframe {kf_id}")
            pairs = [(-w, kid) for kid, w in self.covis[kf_id].items() if w >= min_weight]
            pairs.sort()
            ids = [kid for _, kid in pairs]
            return ids if k is None else ids[:k]

    def update_median_depth(self, kf_id: int) -> float:
        with self.lock:
            kf = self.keyframes[kf_id]
            pids = sorted(kf.observed_points())
            if not pids:
                return kf.median_scene_depth
            pos = np.array([self.points[p].position for p in pids])
            depths = (pos @ kf.pose.R.T + kf.pose.t)[:, 2]
            depths = depths[depths > 0]
            if len(depths):
                kf.median_scene_depth = float(np.median(depths))
            return kf.median_scene_depth

    def snapshot_tracking(self):
        """Arrays of ORB-matchable points: (ids, positions, descriptors, levels)."""
        with self.lock:
            if self._snapshot_cache is not None:
                return self._snapshot_cache
            pids = [pid for pid, mp in self.points.items() if mp.provenance == PROV_ORB]
            if not pids:
                z = np.zeros(0, dtype=np.int64)
                return z, np.zeros((0, 3)), np.zeros((0, 32), dtype=np.uint8), np.zeros(0, dtype=np.int32)
            ids = np.array(pids, dtype=np.int64)
            pos = np.array([self.points[p].position for p in pids])
            desc = np.array([self.points[p].descriptor for p in pids], dtype=np.uint8)
            lev = np.array([self.points[p].ref_level for p in pids], dtype=np.int32)
            self._snapshot_cache = (ids, pos, desc, lev)
            return self._snapshot_cache

    def snapshot_semidense(self):
        """Densified points with their anchor patches for per-frame re-tracking."""
        with self.lock:
            if self._semidense_cache is not None:
                return self._semidense_cache
            out = []
            for pid, mp in self.points.items():
                if mp.provenance != PROV_DENSE or mp.anchor_patch is None:
                    continue
                out.append((pid, mp.position.copy(), mp.anchor_patch, mp.anchor_level,
                            mp.anchor_kf, mp.anchor_uv))
            self._semidense_cache = out
            return out

    # -- culling ----------------------------------------------------------------

    def cull_points(self, current_frame: int, min_parallax_deg: float = 1.4035,
                    max_chi2: float = 0.5991, found_ratio: float = 0.25,
                    window: int = 25, cam=None) -> list:
        """The three-rule provisional-point filter; returns removed ids."""
        with self.lock:
            pids = sorted(pid for pid, mp in self.points.items() if not mp.mature)
            if not pids:
                return []
            n = len(pids)
            cull = np.zeros(n, dtype=bool)
            pos = np.array([self.points[p].position for p in pids])
            age = np.array([current_frame - self.points[p].created_frame for p in pids])
            vis = np.array([self.points[p].visible_count for p in pids], dtype=np.float64)
            fnd = np.array([self.points[p].found_count for p in pids], dtype=np.float64)

            # rule 1: cannot be tracked and matched
            ratio = np.where(vis > 0, fnd / np.maximum(vis, 1.0), 1.0)
            cull |= ((vis >= 8) | (age > window)) & (vis > 0) & (ratio < found_ratio)

            centers = {kid: kf.pose.center() for kid, kf in self.keyframes.items()}
            # rule 2: low triangulation parallax (best pair of observers),
            # vectorized per point over a padded center table
            rows = []
            row_pids = []
            max_k = 2
            for i, pid in enumerate(pids):
                if cull[i]:
                    continue
                cs = [centers[k] for k in sorted(self.points[pid].observations) if k in centers]
                if len(cs) < 2:
                    continue
                rows.append(cs)
                row_pids.append(i)
                max_k = max(max_k, len(cs))
            if rows:
                table = np.full((len(rows), max_k, 3), np.nan)
                for r, cs in enumerate(rows):
                    table[r, : len(cs)] = cs
                rel = table - pos[row_pids][:, None, :]
                norms = np.linalg.norm(rel, axis=2)
                unit = rel / np.where(np.isnan(norms) | (norms == 0), 1.0, norms)[:, :, None]
                cosm = np.einsum("rik,rjk->rij", unit, unit)
                iu = np.triu_indices(max_k, k=1)
                pairc = cosm[:, iu[0], iu[1]]
                pairc = np.where(np.isnan(pairc), 1.0, np.clip(pairc, -1.0, 1.0))
                best = np.degrees(np.arccos(pairc.min(axis=1)))
                low = best < min_parallax_deg
                cull[np.array(row_pids)[low]] = True

            # rule 3: excessive reprojection error, grouped by keyframe
            if cam is not None:
                by_kf: dict[int, list] = {}
                for i, pid in enumerate(pids):
                    if cull[i]:
                        continue
                    for kid, ob in self.points[pid].observations.items():
                        if kid in self.keyframes:
                            by_kf.setdefault(kid, []).append((i, ob))
                for kid in sorted(by_kf):
                    rows = by_kf[kid]
                    kf = self.keyframes[kid]
                    idx = np.array([r[0] for r in rows])
                    uv_obs = np.array([r[1].uv for r in rows])
                    lv = np.array([r[1].level for r in rows], dtype=np.float64)
                    uv, _, _, front = project_points(kf.pose.R, kf.pose.t, pos[idx], cam)
                    err2 = ((uv - uv_obs) ** 2).sum(axis=1) / self.scale_factor ** (2 * lv)
                    bad = ~front | (err2 > max_chi2)
                    cull[idx[bad]] = True

            removed = []
            for i, pid in enumerate(pids):
                if cull[i]:
                    self.remove_point(pid)
                    removed.append(pid)
                elif age[i] > window:
                    self.points[pid].mature = True
        return removed

    def cull_keyframes(self, redundancy: float = 0.9, keep_recent: int = 2,
                       min_other_observers: int = 3) -> list:
        """Drop keyframes whose feature observations are redundant.

        Counts keypoint (ORB) observations only: patch-tracked observations of
        densified points appear in nearly every keyframe and would make the
        redundancy measure degenerate. The newest keyframes are never removed.
        """
        removed = []
        with self.lock:
            ids = sorted(self.keyframes)
            protected = set(ids[-keep_recent:]) if keep_recent > 0 else set()
            for kid in ids:
                if kid in protected:
                    continue
                kf = self.keyframes[kid]
                pids = sorted(set(kf.point_for_kp.values()))
                if not pids:
                    continue
                redundant = 0
                for pid in pids:
                    mp = self.points.get(pid)
                    if mp is None:
                        continue
                    my_level = mp.observations[kid].level
                    others = 0
                    for okid, ob in mp.observations.items():
                        if okid != kid and ob.kp_index >= 0 and ob.level <= my_level:
                            others += 1
                    if others >= min_other_observers:
                        redundant += 1
                if redundant / len(pids) >= redundancy:
                    self.remove_keyframe(kid)
                    removed.append(kid)
        return removed

    # -- integrity ---------------------------------------------------------------

    def rebuild_covisibility(self):
        """From-scratch covisibility recomputation (test oracle)."""
        with self.lock:
            fresh = {kid: {} for kid in self.keyframes}
            for mp in self.points.values():
                kids = sorted(mp.observations)
                for i in range(len(kids)):
                    for j in range(i + 1, len(kids)):
                        a, b = kids[i], kids[j]
                        fresh[a][b] = fresh[a].get(b, 0) + 1
                        fresh[b][a] = fresh[b].get(a, 0) + 1
            return fresh

    def audit(self) -> list:
        """Referential-integrity problems, empty when healthy."""
        problems = []
        with self.lock:
            for pid, mp in self.points.items():
                for kid, ob in mp.observations.items():
                    kf = self.keyframes.get(kid)
                    if kf is None:
                        problems.append(f"point {pid} observes dead keyframe {kid}")
                    elif ob.kp_index >= 0:
                        if kf.point_for_kp.get(ob.kp_index) != pid:
                            problems.append(f"point {pid} not mirrored by keyframe {kid}")
                    elif pid not in kf.patch_points:
                        problems.append(f"patch point {pid} not mirrored by keyframe {kid}")
            for kid, kf in self.keyframes.items():
                for kp_idx, pid in kf.point_for_kp.items():
                    mp = self.points.get(pid)
                    if mp is None or kid not in mp.observations:
                        problems.append(f"keyframe {kid} links dead point {pid}")
                for pid in kf.patch_points:
                    mp = self.points.get(pid)
                    if mp is None or kid not in mp.observations:
                        problems.append(f"keyframe {kid} patch-links dead point {pid}")
            fresh = self.rebuild_covisibility()
            if fresh != {k: dict(v) for k, v in self.covis.items()}:
                problems.append("covisibility graph inconsistent with observations")
        return problems

    # -- export -------------------------------------------------------------------

    def export_text(self, path) -> None:
        """Versioned line format; see README for the field order."""
        with self.lock, open(path, "w", encoding="ascii") as fh:
            fh.write(f"{MAP_MAGIC}\n")
            fh.write(f"points {len(self.points)}\n")
            fh.write(f"keyframes {len(self.keyframes)}\n")
            for pid in sorted(self.points):
                mp = self.points[pid]
                x, y, z = mp.position
                fh.write(
                    f"point {pid} {x:.17g} {y:.17g} {z:.17g} {mp.provenance} {len(mp.observations)}\n"
                )
            for kid in sorted(self.keyframes):
                kf = self.keyframes[kid]
                c = kf.pose.center()
                q = quat_from_rotation(kf.pose.R.T)  # camera-to-world
                fh.write(
                    f"keyframe {kid} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g} "
                    f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g} {kf.timestamp:.17g}\n"
                )


def load_map_points(path):
    """Parse a map export; returns (points (N,3), provenance (N,), keyframe poses).

    Keyframe poses come back as (id, Pose world-to-camera, timestamp) tuples.
    """
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != MAP_MAGIC:
            raise MapError(f"{path}: not a map file (header {header!r})")
        n_points = int(fh.readline().split()[1])
        n_kfs = int(fh.readline().split()[1])
        pts, prov, kfs = [], [], []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "point":
                pts.append([float(parts[2]), float(parts[3]), float(parts[4])])
                prov.append(parts[5])
            elif parts[0] == "keyframe":
                c = np.array([float(parts[2]), float(parts[3]), float(parts[4])])
                q = np.array([float(parts[5]), float(parts[6]), float(parts[7]), float(parts[8])])
                R_cw = rotation_from_quat(q)
                kfs.append((int(parts[1]), Pose(R_cw.T, -R_cw.T @ c), float(parts[9])))
            else:
                raise MapError(f"{path}: unexpected record {parts[0]!r}")
    if len(pts) != n_points or len(kfs) != n_kfs:
        raise MapError(f"{path}: header counts do not match records")
    return np.array(pts, dtype=np.float64).reshape(-1, 3), np.array(prov), kfs
