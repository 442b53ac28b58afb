"""Probabilistic ternary occupancy map with local resolution refinement.

Cells live in sparse hash grids, one per refinement level; level ``n``
cells have edge ``resolution / 2**n`` and nest exactly inside their level-0
parents. Occupancy is a clamped log-odds per cell updated with the usual
Bayes hit/miss increments and classified ternary (free / unknown /
occupied) by thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Aabb, Pose
from .sensors import PointCloud

_OFF = 1 << 20          # supports |cell index| < 2**20 per axis
_MASK = (1 << 21) - 1


def pack_keys(idx: np.ndarray) -> np.ndarray:
    idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
    return ((idx[:, 0] + _OFF) << 42) | ((idx[:, 1] + _OFF) << 21) | (idx[:, 2] + _OFF)


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([(keys >> 42) - _OFF,
                     ((keys >> 21) & _MASK) - _OFF,
                     (keys & _MASK) - _OFF], axis=1)


class CellState(IntEnum):
    FREE = 0
    UNKNOWN = 1
    OCCUPIED = 2


class RayKind(IntEnum):
    NONE = 0          # ray exhausted its range through free space
    UNKNOWN = 1
    OCCUPIED = 2


@dataclass
class RaycastHit:
    point: np.ndarray
    cell_center: np.ndarray
    kind: RayKind
    distance: float


@dataclass
class DenseMapConfig:
    resolution: float = 0.2
    hit_logodds: float = 0.85
    miss_logodds: float = -0.4
    clamp_logodds: float = 3.5
    occupied_threshold: float = 0.6
    free_threshold: float = -0.6
    max_refine_factor: int = 3
    unknown_blocks_raycast: bool = True


class DenseMap:
    def __init__(self, cfg: DenseMapConfig | None = None):
        self.cfg = cfg or DenseMapConfig()
        self._levels: dict[int, dict[int, float]] = {0: {}}
        self._regions: list[tuple[Aabb, int]] = []   # refined region -> level
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] | None = None

    # -- resolution handling -----------------------------------------------

    def resolution_at(self, n: int) -> float:
        return self.cfg.resolution / (2 ** n)

    def level_of(self, points: np.ndarray) -> np.ndarray:
        """Refinement level governing each point (0 outside refined regions)."""
        pts = np.atleast_2d(points)
        out = np.zeros(len(pts), dtype=np.int64)
        for box, n in self._regions:
            inside = box.contains_many(pts)
            out[inside] = np.maximum(out[inside], n)
        return out

    def refine_region(self, box: Aabb, n: int) -> None:
        """Locally subdivide cells inside ``box`` to resolution/2**n.

        The region is snapped outward to level-0 cell boundaries so refined
        cells nest exactly. Existing cell values inside are pushed down to
        the fine level so information is preserved.
        """
        if n <= 0:
            return
        if n > self.cfg.max_refine_factor:
            raise ValueError(f"refine factor {n} above limit {self.cfg.max_refine_factor}")
        res = self.cfg.resolution
        lo = tuple(math.floor(v / res) * res for v in box.lo)
        hi = tuple(math.ceil(v / res) * res for v in box.hi)
        snapped = Aabb(lo, hi)
        self._levels.setdefault(n, {})
        coarse = self._levels[0]
        if coarse:
            keys = np.fromiter(coarse.keys(), dtype=np.int64, count=len(coarse))
            centers = self.cell_centers(keys, 0)
            inside = snapped.contains_many(centers)
            factor = 2 ** n
            fine = self._levels[n]
            for key, center in zip(keys[inside], centers[inside]):
                value = coarse.pop(int(key))
                base = np.floor(center / res).astype(np.int64) * factor
                offs = np.arange(factor)
                gx, gy, gz = np.meshgrid(offs, offs, offs, indexing="ij")
                children = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) + base
                for ck in pack_keys(children):
                    fine[int(ck)] = value
        self._regions.append((snapped, n))
        self._cache = None

    # -- cell addressing -----------------------------------------------------

    def cell_index(self, points: np.ndarray, level: int) -> np.ndarray:
        res = self.resolution_at(level)
        return np.floor(np.atleast_2d(points) / res).astype(np.int64)

    def cell_centers(self, keys: np.ndarray, level: int) -> np.ndarray:
        res = self.resolution_at(level)
        return (unpack_keys(keys) + 0.5) * res

    # -- updates --------------------------------------------------------------

    def _apply(self, level: int, keys: np.ndarray, delta: float) -> None:
        store = self._levels.setdefault(level, {})
        clamp = self.cfg.clamp_logodds
        for k in keys:
            k = int(k)
            v = store.get(k, 0.0) + delta
            store[k] = max(-clamp, min(clamp, v))
        self._cache = None

    def insert_scan(self, cloud: PointCloud, pose: Pose, *, filtered: bool = True) -> None:
        """Integrate one sensor-frame cloud taken from ``pose``.

        Rays to each return charge miss updates along their length and a
        hit update at the endpoint. Callers must run the observation-noise
        filter first and say so via ``filtered``.
        """
        if not filtered:
            raise ValueError("insert_scan requires a noise-filtered cloud")
        if len(cloud) == 0:
            return
        pts_world = pose.transform(cloud.points)
        origin = pose.position
        diffs = pts_world - origin
        dists = np.linalg.norm(diffs, axis=1)
        ok = dists > 1e-9
        pts_world, diffs, dists = pts_world[ok], diffs[ok], dists[ok]
        if len(pts_world) == 0:
            return
        dirs = diffs / dists[:, None]

        levels = sorted(self._levels.keys())
        for level in levels:
            res = self.resolution_at(level)
            step = res / 2.0
            # free-space samples, stopping half a cell short of the endpoint
            max_t = float(dists.max())
            ts = np.arange(step, max_t, step)
            if len(ts):
                pts = origin[None, None, :] + ts[None, :, None] * dirs[:, None, :]
                valid = ts[None, :] < (dists[:, None] - res * 0.5)
                samples = pts[valid]
                if level == 0:
                    keep = self.level_of(samples) == 0 if self._regions else \
                        np.ones(len(samples), dtype=bool)
                else:
                    keep = self.level_of(samples) == level
                samples = samples[keep]
                if len(samples):
                    keys = np.unique(pack_keys(self.cell_index(samples, level)))
                    self._apply(level, keys, self.cfg.miss_logodds)
        # endpoint hits at each endpoint's local level
        end_levels = self.level_of(pts_world)
        for level in np.unique(end_levels):
            sel = pts_world[end_levels == level]
            keys = np.unique(pack_keys(self.cell_index(sel, int(level))))
            self._apply(int(level), keys, self.cfg.hit_logodds)

    # -- classification ---------------------------------------------------------

    def _classify(self, logodds: float) -> CellState:
        if logodds > self.cfg.occupied_threshold:
            return CellState.OCCUPIED
        if logodds < self.cfg.free_threshold:
            return CellState.FREE
        return CellState.UNKNOWN

    def state_at(self, point: np.ndarray, aggregate: bool = False) -> CellState:
        """Ternary state at a point (its local level), or the level-0
        aggregate when ``aggregate`` (occupied if any child occupied)."""
        point = np.asarray(point, dtype=float)
        level = int(self.level_of(point[None, :])[0])
        if not aggregate or level == 0:
            store = self._levels.get(level, {})
            key = int(pack_keys(self.cell_index(point[None, :], level))[0])
            if key not in store:
                return CellState.UNKNOWN
            return self._classify(store[key])
        # aggregate the refined children of the level-0 cell
        res0 = self.cfg.resolution
        factor = 2 ** level
        base = np.floor(point / res0).astype(np.int64) * factor
        offs = np.arange(factor)
        gx, gy, gz = np.meshgrid(offs, offs, offs, indexing="ij")
        children = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) + base
        store = self._levels.get(level, {})
        worst = CellState.FREE
        for ck in pack_keys(children):
            v = store.get(int(ck))
            state = CellState.UNKNOWN if v is None else self._classify(v)
            worst = max(worst, state)
            if worst == CellState.OCCUPIED:
                break
        return worst

    def _classified_keys(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Per level: (sorted occupied keys, sorted free keys)."""
        if self._cache is None:
            cache = {}
            for level, store in self._levels.items():
                if not store:
                    cache[level] = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
                    continue
                keys = np.fromiter(store.keys(), dtype=np.int64, count=len(store))
                vals = np.fromiter(store.values(), dtype=float, count=len(store))
                occ = np.sort(keys[vals > self.cfg.occupied_threshold])
                free = np.sort(keys[vals < self.cfg.free_threshold])
                cache[level] = (occ, free)
            self._cache = cache
        return self._cache

    def states_at(self, points: np.ndarray) -> np.ndarray:
        """Vectorized ternary state lookup at each point's local level."""
        pts = np.atleast_2d(points)
        out = np.full(len(pts), int(CellState.UNKNOWN), dtype=np.int64)
        levels = self.level_of(pts) if self._regions else np.zeros(len(pts), dtype=np.int64)
        cache = self._classified_keys()
        for level in np.unique(levels):
            occ, free = cache.get(int(level), (None, None))
            if occ is None:
                continue
            mask = levels == level
            keys = pack_keys(self.cell_index(pts[mask], int(level)))
            code = np.full(int(mask.sum()), int(CellState.UNKNOWN), dtype=np.int64)
            if len(occ):
                pos = np.searchsorted(occ, keys)
                pos = np.clip(pos, 0, len(occ) - 1)
                code[occ[pos] == keys] = int(CellState.OCCUPIED)
            if len(free):
                pos = np.searchsorted(free, keys)
                pos = np.clip(pos, 0, len(free) - 1)
                code[(free[pos] == keys) & (code == int(CellState.UNKNOWN))] = int(CellState.FREE)
            out[mask] = code
        return out

    # -- raycasting ----------------------------------------------------------

    def raycast(self, origin: np.ndarray, direction: np.ndarray,
                max_range: float = 50.0) -> RaycastHit | None:
        """Exact voxel traversal to the first blocking cell.

        Returns the entry point of the first occupied cell, or of the first
        unknown cell when the map is configured to treat unknown space as
        blocking. ``None`` when the ray runs out of range through free
        space (or through unknown space when unknown does not block).
        """
        direction = np.asarray(direction, dtype=float)
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            raise ValueError("raycast direction must be nonzero")
        direction = direction / norm
        origin = np.asarray(origin, dtype=float)
        state0 = self.state_at(origin)
        if state0 == CellState.OCCUPIED:
            level = int(self.level_of(origin[None, :])[0])
            res = self.resolution_at(level)
            center = (np.floor(origin / res) + 0.5) * res
            return RaycastHit(origin.copy(), center, RayKind.OCCUPIED, 0.0)
        blocks_unknown = self.cfg.unknown_blocks_raycast

        t = 0.0
        while t < max_range:
            level = int(self.level_of((origin + direction * (t + 1e-9))[None, :])[0])
            res = self.resolution_at(level)
            hit, t = self._dda(origin, direction, t, max_range, res, level, blocks_unknown)
            if hit is not None:
                return hit
            if t >= max_range:
                return None
        return None

    def _dda(self, origin: np.ndarray, direction: np.ndarray, t0: float,
             max_range: float, res: float, level: int,
             blocks_unknown: bool) -> tuple[RaycastHit | None, float]:
        """March one level's grid from parameter t0; stop at level changes."""
        p = origin + direction * (t0 + 1e-9)
        cell = np.floor(p / res).astype(np.int64)
        step = np.where(direction > 0, 1, -1).astype(np.int64)
        with np.errstate(divide="ignore"):
            t_delta = np.where(direction != 0.0, res / np.abs(direction), np.inf)
            next_bound = (cell + (step > 0)) * res
            t_max = np.where(direction != 0.0,
                             (next_bound - origin) / direction, np.inf)
        store = self._levels.get(level, {})
        t = t0
        while t < max_range:
            # state of the current cell (entered at parameter t)
            key = int(pack_keys(cell[None, :])[0])
            v = store.get(key)
            state = CellState.UNKNOWN if v is None else self._classify(v)
            if state == CellState.OCCUPIED or (blocks_unknown and state == CellState.UNKNOWN
                                               and t > 0.0):
                kind = RayKind.OCCUPIED if state == CellState.OCCUPIED else RayKind.UNKNOWN
                point = origin + direction * t
                center = (cell + 0.5) * res
                return RaycastHit(point, center, kind, t), t
            axis = int(np.argmin(t_max))
            t = float(t_max[axis])
            cell[axis] += step[axis]
            t_max[axis] += t_delta[axis]
            if self._regions:
                nxt_level = int(self.level_of((origin + direction * (t + 1e-9))[None, :])[0])
                if nxt_level != level:
                    return None, t
        return None, max_range

    def classify_rays(self, origin: np.ndarray, dirs: np.ndarray,
                      max_range: float, step: float | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
        """Batched approximate classification of many rays at once.

        Returns (kind codes per RayKind, event distance). A ray resolves at
        the first sampled unknown or occupied cell; rays that stay in free
        space to max range report NONE. Used for information-gain scoring,
        not for exact geometry.
        """
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = len(dirs)
        if step is None:
            step = self.cfg.resolution / 2.0
        kinds = np.zeros(n, dtype=np.int64)
        dist = np.full(n, max_range)
        active = np.arange(n)
        t0 = step
        chunk = 16
        while t0 <= max_range and len(active):
            ts = t0 + step * np.arange(chunk)
            ts = ts[ts <= max_range + 1e-12]
            if not len(ts):
                break
            pts = origin[None, None, :] + ts[:, None, None] * dirs[None, active, :]
            states = self.states_at(pts.reshape(-1, 3)).reshape(len(ts), len(active))
            event = states != int(CellState.FREE)
            has = np.any(event, axis=0)
            if np.any(has):
                first = np.argmax(event, axis=0)
                rows = active[has]
                kinds[rows] = states[first[has], np.flatnonzero(has)]
                dist[rows] = ts[first[has]]
            active = active[~has]
            t0 = ts[-1] + step
        return kinds, dist

    def segments_blocked(self, origin: np.ndarray, targets: np.ndarray,
                         margin: float = 1.0) -> np.ndarray:
        """True where an occupied cell sits on the segment before the target.

        ``margin`` cells at the target end are excluded so a query to a
        surface point is not blocked by the surface itself.
        """
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        d = targets - origin[None, :]
        lens = np.linalg.norm(d, axis=1)
        out = np.zeros(len(targets), dtype=bool)
        live = lens > 1e-9
        if not np.any(live):
            return out
        step = self.cfg.resolution / 2.0
        dirs = np.zeros_like(d)
        dirs[live] = d[live] / lens[live, None]
        limit = lens - margin * self.cfg.resolution
        max_len = float(limit[live].max()) if np.any(live) else 0.0
        ts = np.arange(step, max_len, step)
        if not len(ts):
            return out
        pts = origin[None, None, :] + ts[:, None, None] * dirs[None, :, :]
        states = self.states_at(pts.reshape(-1, 3)).reshape(len(ts), -1)
        occ = states == int(CellState.OCCUPIED)
        occ &= ts[:, None] < limit[None, :]
        out = np.any(occ, axis=0)
        out &= live
        return out

    # -- exports ---------------------------------------------------------------

    def occupied_centers(self) -> np.ndarray:
        """Centers of all occupied cells, all levels (N,3)."""
        parts = []
        for level in sorted(self._levels.keys()):
            occ, _ = self._classified_keys()[level]
            if len(occ):
                parts.append(self.cell_centers(occ, level))
        if not parts:
            return np.zeros((0, 3))
        return np.vstack(parts)

    def free_centers(self) -> np.ndarray:
        parts = []
        for level in sorted(self._levels.keys()):
            _, free = self._classified_keys()[level]
            if len(free):
                parts.append(self.cell_centers(free, level))
        if not parts:
            return np.zeros((0, 3))
        return np.vstack(parts)

    def extract_kdtree(self) -> "ObstacleIndex":
        return ObstacleIndex(self.occupied_centers())

    def to_ply(self) -> str:
        pts = self.occupied_centers()
        lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
                 "property float x", "property float y", "property float z",
                 "end_header"]
        lines += [f"{p[0]:.4f} {p[1]:.4f} {p[2]:.4f}" for p in pts]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        pts = self.occupied_centers()
        lines = ["x,y,z"]
        lines += [f"{p[0]:.4f},{p[1]:.4f},{p[2]:.4f}" for p in pts]
        return "\n".join(lines) + "\n"


class ObstacleIndex:
    """Nearest-obstacle queries over occupied cell centers."""

    def __init__(self, centers: np.ndarray):
        self.centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        self._tree = cKDTree(self.centers) if len(self.centers) else None

    def clearance(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self._tree is None:
            return np.full(len(pts), np.inf)
        d, _ = self._tree.query(pts)
        return np.atleast_1d(d)

    def __len__(self) -> int:
        return len(self.centers)
