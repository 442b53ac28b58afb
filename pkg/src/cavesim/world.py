"""Ground-truth world: voxelized occupancy, artifacts, fog and dust regions.

The world is immutable after load; all queries are pure. Sensor simulation
lives in :mod:`cavesim.sensors`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .geometry import Aabb
from .scenario import ARTIFACT_CLASSES, Scenario, ScenarioError


@dataclass(frozen=True)
class Artifact:
    uid: int
    cls: str
    position: tuple[float, float, float]
    size: float


@dataclass(frozen=True)
class FogEmitter:
    uid: int
    center: tuple[float, float, float]
    radius: float
    trigger: float


@dataclass(frozen=True)
class DustZone:
    box: Aabb
    density: float
    intensity_min: float
    intensity_max: float


class World:
    """Immutable voxel world built from a validated scenario."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.voxel = float(scenario.voxel)
        if self.voxel <= 0:
            raise ScenarioError("voxel size must be positive")

        boxes = [Aabb(b.lo, b.hi) for b in scenario.boxes]
        if scenario.bounds is not None:
            bounds = Aabb(scenario.bounds.lo, scenario.bounds.hi)
        else:
            if not boxes:
                raise ScenarioError("world needs explicit bounds or at least one box")
            bounds = boxes[0]
            for b in boxes[1:]:
                bounds = bounds.union(b)
            bounds = bounds.inflate(2.0 * self.voxel)
        self.bounds = bounds

        lo = np.asarray(bounds.lo)
        hi = np.asarray(bounds.hi)
        self.origin = np.floor(lo / self.voxel).astype(np.int64)
        shape = np.ceil(hi / self.voxel).astype(np.int64) - self.origin
        self.shape = tuple(int(max(1, s)) for s in shape)
        self.occ = np.zeros(self.shape, dtype=bool)

        for b in boxes:
            i0 = np.floor(np.asarray(b.lo) / self.voxel).astype(np.int64) - self.origin
            i1 = np.ceil(np.asarray(b.hi) / self.voxel).astype(np.int64) - self.origin
            i0 = np.clip(i0, 0, np.asarray(self.shape))
            i1 = np.clip(i1, 0, np.asarray(self.shape))
            self.occ[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]] = True

        self.home = np.asarray(scenario.home, dtype=float)
        self.artifacts = tuple(
            Artifact(i, a.cls, a.position, a.size)
            for i, a in enumerate(scenario.artifacts)
        )
        self.fog_emitters = tuple(
            FogEmitter(i, f.center, f.radius, f.trigger)
            for i, f in enumerate(scenario.fog)
        )
        self.dust_zones = tuple(
            DustZone(Aabb(d.lo, d.hi), d.density, d.intensity_min, d.intensity_max)
            for d in scenario.dust
        )
        self._validate()

    # -- validation ------------------------------------------------------

    def _validate(self) -> None:
        for a in self.artifacts:
            if a.cls not in ARTIFACT_CLASSES:
                raise ScenarioError(f"artifact {a.uid}: unknown class {a.cls!r}")
            if not self.bounds.contains(a.position):
                raise ScenarioError(f"artifact {a.uid} at {a.position} outside world bounds")
            if self.is_occupied(np.asarray(a.position)):
                raise ScenarioError(f"artifact {a.uid} at {a.position} inside occupied voxel")
        for f in self.fog_emitters:
            if not self.bounds.contains(f.center):
                raise ScenarioError(f"fog emitter {f.uid} outside world bounds")
        for d in self.dust_zones:
            if not self.bounds.intersects(d.box):
                raise ScenarioError("dust zone outside world bounds")
        if not self.bounds.contains(tuple(self.home)):
            raise ScenarioError("home position outside world bounds")

    # -- queries ---------------------------------------------------------

    def index_of(self, points: np.ndarray) -> np.ndarray:
        """World points (N,3) -> integer voxel indices (N,3), unclipped."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor(pts / self.voxel).astype(np.int64) - self.origin

    def center_of(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        return (idx + self.origin + 0.5) * self.voxel

    def is_occupied(self, points: np.ndarray) -> np.ndarray | bool:
        """Occupancy of the voxel containing each point; outside bounds -> False."""
        single = np.asarray(points).ndim == 1
        idx = self.index_of(points)
        ok = np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=1)
        out = np.zeros(len(idx), dtype=bool)
        sel = idx[ok]
        out[ok] = self.occ[sel[:, 0], sel[:, 1], sel[:, 2]]
        return bool(out[0]) if single else out

    def inside(self, p: np.ndarray) -> bool:
        return self.bounds.contains(tuple(np.asarray(p, dtype=float)))

    def occupied_centers(self) -> np.ndarray:
        idx = np.argwhere(self.occ)
        return self.center_of(idx)

    # -- raycasting against ground truth ----------------------------------

    def raycast(self, origin: np.ndarray, dirs: np.ndarray, max_range: float,
                refine: int = 4) -> tuple[np.ndarray, np.ndarray]:
        """March rays from one origin; unit ``dirs`` (N,3).

        Returns (hit mask (N,), hit points (N,3)). Step is voxel/4 with a
        short bisection refinement, so hit points sit within half a step
        of the entered voxel's boundary. Rays are resolved in depth chunks
        so short hits terminate early.
        """
        origin = np.asarray(origin, dtype=float)
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = len(dirs)
        step = self.voxel / 4.0
        hit = np.zeros(n, dtype=bool)
        t_hit = np.full(n, max_range)
        active = np.arange(n)
        t0 = step
        chunk = 32
        while t0 <= max_range and len(active):
            ts = t0 + step * np.arange(chunk)
            ts = ts[ts <= max_range + 1e-12]
            if len(ts) == 0:
                break
            pts = origin[None, None, :] + ts[:, None, None] * dirs[None, active, :]
            occ = self.is_occupied(pts.reshape(-1, 3)).reshape(len(ts), len(active))
            any_hit = np.any(occ, axis=0)
            if np.any(any_hit):
                first = np.argmax(occ, axis=0)
                rows = active[any_hit]
                hit[rows] = True
                t_hit[rows] = ts[first[any_hit]]
            active = active[~any_hit]
            t0 = ts[-1] + step
        if np.any(hit):
            rows = np.flatnonzero(hit)
            t_h = t_hit[rows]
            t_lo = np.maximum(t_h - step, 0.0)
            for _ in range(refine):
                t_mid = 0.5 * (t_lo + t_h)
                mid_occ = self.is_occupied(origin[None, :] + t_mid[:, None] * dirs[rows])
                t_h = np.where(mid_occ, t_mid, t_h)
                t_lo = np.where(mid_occ, t_lo, t_mid)
            t_hit[rows] = t_h
        pts_hit = origin[None, :] + t_hit[:, None] * dirs
        return hit, pts_hit

    def segment_blocked(self, start: np.ndarray, ends: np.ndarray) -> np.ndarray:
        """True where the straight segment start->end crosses an occupied voxel."""
        ends = np.atleast_2d(np.asarray(ends, dtype=float))
        d = ends - start[None, :]
        lens = np.linalg.norm(d, axis=1)
        out = np.zeros(len(ends), dtype=bool)
        live = lens > 1e-9
        if not np.any(live):
            return out
        step = self.voxel / 4.0
        max_len = float(lens[live].max())
        ts = np.arange(step, max_len, step)
        if len(ts) == 0:
            return out
        dirs = np.zeros_like(d)
        dirs[live] = d[live] / lens[live, None]
        pts = start[None, None, :] + ts[:, None, None] * dirs[None, :, :]
        occ = self.is_occupied(pts.reshape(-1, 3)).reshape(len(ts), -1)
        occ &= ts[:, None] < lens[None, :] - 1e-9
        out = np.any(occ, axis=0)
        out &= live
        return out

    # -- misc --------------------------------------------------------------

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.packbits(self.occ.reshape(-1)).tobytes())
        h.update(repr((self.voxel, tuple(self.origin), self.shape,
                       tuple(self.home), self.artifacts, self.fog_emitters,
                       self.dust_zones)).encode())
        return h.hexdigest()


def load_world(scenario: Scenario) -> World:
    return World(scenario)
