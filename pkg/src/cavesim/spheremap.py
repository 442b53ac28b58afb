"""Sphere-graph free-space map with segments, portals, and cached
risk-aware path costs.

Three layers: (1) a graph of intersecting free-space spheres whose radii
carry obstacle clearance, (2) roughly convex segments of that graph, and
(3) a navigation layer whose vertices are portal endpoints and whose edges
are optimal intra-segment paths, cached per risk-avoidance value.

Between two adjacent segments exactly one sphere-sphere connection (the
portal) is retained; all other crossing edges are dropped, which keeps the
hierarchical search exactly optimal over the retained graph.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .densemap import CellState, DenseMap, ObstacleIndex


class PlanQueryError(ValueError):
    """Query point cannot be attached to the sphere graph."""


class BrokenAdjacencyError(ValueError):
    """Path refers to non-intersecting consecutive spheres."""


@dataclass
class SphereMapConfig:
    min_radius: float = 0.8          # r_min: smallest allowed obstacle clearance
    safe_radius: float = 2.0         # r_safe: clearance considered fully safe
    samples_per_update: int = 150
    update_box: float = 20.0
    segment_max_size: float = 30.0   # cap on segment diameter
    snap_epsilon: float = 0.5        # goal attachment slack outside spheres


@dataclass
class PathCost:
    length: float                    # L
    risk: float                      # R in [0, L]
    risk_avoidance: float            # c_R

    @property
    def total(self) -> float:
        return self.length + self.risk_avoidance * self.risk


@dataclass
class PlanResult:
    sphere_ids: list[int]
    points: np.ndarray               # (N,3) p1, centers..., p2
    cost: PathCost


def risk_weight(radius: float, r_min: float, r_safe: float) -> float:
    """Linear clearance-to-risk map: 1 at r_min, 0 at r_safe, clamped."""
    if r_safe <= r_min:
        return 1.0 if radius <= r_min else 0.0
    w = (r_safe - radius) / (r_safe - r_min)
    return min(1.0, max(0.0, w))


class SphereMap:
    def __init__(self, cfg: SphereMapConfig | None = None):
        self.cfg = cfg or SphereMapConfig()
        self.centers: dict[int, np.ndarray] = {}
        self.radii: dict[int, float] = {}
        self.adjacency: dict[int, set[int]] = {}       # retained edges only
        self.segment_of: dict[int, int] = {}
        self.segments: dict[int, list[int]] = {}
        self.seeds: dict[int, int] = {}                # segment -> seed sphere
        self.portals: dict[tuple[int, int], tuple[int, int]] = {}  # (segA,segB)->(u,v)
        self._next_sphere = 0
        self._next_segment = 0
        # per (c_R key, segment id): {(u, v): (L, R, path ids)}
        self._nav_cache: dict[tuple[int, int], dict] = {}

    # -- helpers ---------------------------------------------------------

    def _edge_cost(self, i: int, j: int) -> tuple[float, float]:
        """(length, risk contribution) of edge i-j."""
        length = float(np.linalg.norm(self.centers[i] - self.centers[j]))
        w = risk_weight(min(self.radii[i], self.radii[j]),
                        self.cfg.min_radius, self.cfg.safe_radius)
        return length, length * w

    def _intersects(self, i: int, j: int) -> bool:
        return (np.linalg.norm(self.centers[i] - self.centers[j])
                < self.radii[i] + self.radii[j] - 1e-12)

    def sphere_ids(self) -> list[int]:
        return sorted(self.centers.keys())

    def containing_spheres(self, p: np.ndarray) -> list[int]:
        p = np.asarray(p, dtype=float)
        return [i for i in self.sphere_ids()
                if np.linalg.norm(p - self.centers[i]) <= self.radii[i] + 1e-12]

    # -- construction ------------------------------------------------------

    def add_sphere(self, center: np.ndarray, radius: float,
                   segment: int | None = None) -> int:
        """Directly add a sphere (used by update and by hand-built worlds)."""
        sid = self._next_sphere
        self._next_sphere += 1
        self.centers[sid] = np.asarray(center, dtype=float)
        self.radii[sid] = float(radius)
        self.adjacency[sid] = set()
        if segment is not None:
            self.segments.setdefault(segment, []).append(sid)
            self.segment_of[sid] = segment
            self.seeds.setdefault(segment, sid)
            self._next_segment = max(self._next_segment, segment + 1)
            for j in self.segments[segment]:
                if j != sid and self._intersects(sid, j):
                    self.adjacency[sid].add(j)
                    self.adjacency[j].add(sid)
        return sid

    def add_portal(self, u: int, v: int) -> None:
        """Declare the portal edge between the segments of u and v."""
        su, sv = self.segment_of[u], self.segment_of[v]
        if su == sv:
            raise ValueError("portal endpoints must lie in different segments")
        if not self._intersects(u, v):
            raise BrokenAdjacencyError(f"portal spheres {u},{v} do not intersect")
        key = (min(su, sv), max(su, sv))
        self.portals[key] = (u, v) if su < sv else (v, u)
        self.adjacency[u].add(v)
        self.adjacency[v].add(u)
        self._nav_cache.clear()

    # -- update ------------------------------------------------------------

    def update(self, densemap: DenseMap, robot_position: np.ndarray,
               rng: np.random.Generator) -> None:
        """One map-maintenance cycle around the robot.

        Samples candidate centers in a box, sizes them by obstacle
        clearance, prunes unsafe/redundant spheres, reassigns segments by
        create-and-merge, and recomputes portals plus cached paths for the
        affected segments.
        """
        robot_position = np.asarray(robot_position, dtype=float)
        obstacles = densemap.extract_kdtree()
        box = self.cfg.update_box

        # refresh radii of existing spheres near the robot; prune unsafe
        for sid in self.sphere_ids():
            c = self.centers[sid]
            if np.max(np.abs(c - robot_position)) > box:
                continue
            radius = min(float(obstacles.clearance(c[None, :])[0]), box)
            self.radii[sid] = radius
            if radius < self.cfg.min_radius:
                self._remove_sphere(sid)

        candidates = [robot_position]
        lo = robot_position - box / 2.0
        hi = robot_position + box / 2.0
        candidates.extend(rng.uniform(lo, hi, size=(self.cfg.samples_per_update, 3)))
        for cand in candidates:
            cand = np.asarray(cand, dtype=float)
            radius = min(float(obstacles.clearance(cand[None, :])[0]), box)
            if radius < self.cfg.min_radius or not math.isfinite(radius):
                continue
            if densemap.state_at(cand) != CellState.FREE:
                continue
            if self._redundant(cand, radius):
                continue
            neighbors = [i for i in self.sphere_ids()
                         if np.linalg.norm(cand - self.centers[i])
                         < radius + self.radii[i] - 1e-12]
            if self.centers and not neighbors:
                continue    # must attach to the graph unless it seeds it
            self.add_sphere(cand, radius)

        self._assign_segments(densemap)
        self._rebuild_portals()
        self._nav_cache.clear()

    def _redundant(self, center: np.ndarray, radius: float) -> bool:
        for i in self.sphere_ids():
            d = float(np.linalg.norm(center - self.centers[i]))
            if d < 0.5 * self.radii[i] and radius <= self.radii[i] * 1.2:
                return True
        return False

    def _remove_sphere(self, sid: int) -> None:
        for j in self.adjacency.pop(sid, set()):
            self.adjacency[j].discard(sid)
        seg = self.segment_of.pop(sid, None)
        if seg is not None and seg in self.segments:
            self.segments[seg] = [i for i in self.segments[seg] if i != sid]
            if not self.segments[seg]:
                del self.segments[seg]
                self.seeds.pop(seg, None)
            elif self.seeds.get(seg) == sid:
                self.seeds[seg] = self.segments[seg][0]
        self.centers.pop(sid, None)
        self.radii.pop(sid, None)
        self._nav_cache.clear()

    def _line_clear(self, densemap: DenseMap, a: np.ndarray, b: np.ndarray) -> bool:
        return not bool(densemap.segments_blocked(a, b[None, :], margin=0.0)[0])

    def _assign_segments(self, densemap: DenseMap) -> None:
        """Create-and-merge segmentation of unassigned spheres.

        A sphere joins a segment when it intersects one of its spheres,
        stays within the size cap of the seed, and has line of sight to the
        seed center (keeps segments roughly convex).
        """
        cap = self.cfg.segment_max_size / 2.0
        for sid in self.sphere_ids():
            if sid in self.segment_of:
                continue
            # try to join an existing segment through any intersecting sphere
            joined = None
            for j in self.sphere_ids():
                if j == sid or j not in self.segment_of or not self._intersects(sid, j):
                    continue
                seg = self.segment_of[j]
                seed_c = self.centers[self.seeds[seg]]
                if (np.linalg.norm(self.centers[sid] - seed_c) <= cap
                        and self._line_clear(densemap, seed_c, self.centers[sid])):
                    joined = seg
                    break
            if joined is None:
                joined = self._next_segment
                self._next_segment += 1
                self.segments[joined] = []
                self.seeds[joined] = sid
            self.segments[joined].append(sid)
            self.segment_of[sid] = joined
            for j in self.segments[joined]:
                if j != sid and self._intersects(sid, j):
                    self.adjacency[sid].add(j)
                    self.adjacency[j].add(sid)
        # merge adjacent segments whose seeds see each other within the cap
        for (sa, sb) in sorted(self._crossing_segment_pairs()):
            if sa not in self.segments or sb not in self.segments:
                continue
            ca, cb = self.centers[self.seeds[sa]], self.centers[self.seeds[sb]]
            if (np.linalg.norm(ca - cb) <= cap
                    and self._line_clear(densemap, ca, cb)):
                self._merge_segments(sa, sb)

    def _crossing_segment_pairs(self) -> set[tuple[int, int]]:
        pairs = set()
        ids = self.sphere_ids()
        for i in ids:
            for j in ids:
                if j <= i:
                    continue
                si, sj = self.segment_of.get(i), self.segment_of.get(j)
                if si is None or sj is None or si == sj:
                    continue
                if self._intersects(i, j):
                    pairs.add((min(si, sj), max(si, sj)))
        return pairs

    def _merge_segments(self, sa: int, sb: int) -> None:
        keep, drop = (sa, sb) if sa < sb else (sb, sa)
        members = self.segments.pop(drop)
        for sid in members:
            self.segment_of[sid] = keep
        self.segments[keep].extend(members)
        self.seeds.pop(drop, None)
        # connect intra-segment intersecting pairs that were cross-segment
        for i in members:
            for j in self.segments[keep]:
                if i != j and self._intersects(i, j):
                    self.adjacency[i].add(j)
                    self.adjacency[j].add(i)

    def _rebuild_portals(self) -> None:
        """Keep exactly one (widest) crossing edge per adjacent segment pair."""
        # drop cross-segment edges; they are re-added for portals below
        for i in self.sphere_ids():
            for j in list(self.adjacency[i]):
                if self.segment_of.get(i) != self.segment_of.get(j):
                    self.adjacency[i].discard(j)
                    self.adjacency[j].discard(i)
        self.portals.clear()
        best: dict[tuple[int, int], tuple[float, int, int]] = {}
        ids = self.sphere_ids()
        for i in ids:
            for j in ids:
                if j <= i:
                    continue
                si, sj = self.segment_of.get(i), self.segment_of.get(j)
                if si is None or sj is None or si == sj:
                    continue
                if not self._intersects(i, j):
                    continue
                key = (min(si, sj), max(si, sj))
                width = min(self.radii[i], self.radii[j])
                u, v = (i, j) if si < sj else (j, i)
                cur = best.get(key)
                if cur is None or width > cur[0] + 1e-12:
                    best[key] = (width, u, v)
        for key, (_, u, v) in sorted(best.items()):
            self.portals[key] = (u, v)
            self.adjacency[u].add(v)
            self.adjacency[v].add(u)

    # -- risk ---------------------------------------------------------------

    def path_risk(self, sphere_ids: list[int]) -> float:
        """Accumulated risk R over a sphere path (edge length times the
        clearance-derived weight of its narrower endpoint)."""
        total = 0.0
        for a, b in zip(sphere_ids[:-1], sphere_ids[1:]):
            if b not in self.adjacency.get(a, set()):
                raise BrokenAdjacencyError(f"spheres {a},{b} are not connected")
            _, risk = self._edge_cost(a, b)
            total += risk
        return total

    def path_length(self, sphere_ids: list[int]) -> float:
        return sum(self._edge_cost(a, b)[0]
                   for a, b in zip(sphere_ids[:-1], sphere_ids[1:]))

    # -- planning -------------------------------------------------------------

    def _boundary_spheres(self, seg: int) -> list[int]:
        out = set()
        for (sa, sb), (u, v) in self.portals.items():
            if sa == seg:
                out.add(u)
            if sb == seg:
                out.add(v)
        return sorted(out)

    def _segment_dijkstra(self, seg: int, source: int, c_r: float,
                          virtual: tuple[np.ndarray, list[int]] | None = None
                          ) -> dict[int, tuple[float, float, float, list[int]]]:
        """Dijkstra restricted to one segment's spheres.

        Returns target -> (cost, L, R, path). ``virtual`` attaches a
        off-graph start point to its containing spheres; the source is then
        the sentinel id -1.
        """
        members = set(self.segments.get(seg, []))
        dist: dict[int, tuple[float, float, float, list[int]]] = {}
        heap: list[tuple[float, int, float, float, tuple]] = []
        if virtual is not None:
            point, attach = virtual
            for sid in attach:
                length = float(np.linalg.norm(point - self.centers[sid]))
                w = risk_weight(self.radii[sid], self.cfg.min_radius, self.cfg.safe_radius)
                risk = length * w
                heapq.heappush(heap, (length + c_r * risk, sid, length, risk, (sid,)))
        else:
            heapq.heappush(heap, (0.0, source, 0.0, 0.0, (source,)))
        while heap:
            cost, node, length, risk, path = heapq.heappop(heap)
            if node in dist:
                continue
            dist[node] = (cost, length, risk, list(path))
            for nxt in sorted(self.adjacency[node]):
                if nxt not in members or nxt in dist:
                    continue
                dl, dr = self._edge_cost(node, nxt)
                heapq.heappush(heap, (cost + dl + c_r * dr, nxt,
                                      length + dl, risk + dr, path + (nxt,)))
        return dist

    def _segment_table(self, seg: int, c_r: float) -> dict:
        key = (int(round(c_r * 1e6)), seg)
        if key not in self._nav_cache:
            table = {}
            for u in self._boundary_spheres(seg):
                table[u] = self._segment_dijkstra(seg, u, c_r)
            self._nav_cache[key] = table
        return self._nav_cache[key]

    def plan(self, p1: np.ndarray, p2: np.ndarray, c_r: float) -> PlanResult | None:
        """Risk-aware route from p1 to p2 with cost D = L + c_R * R.

        Searches the navigation layer (portal endpoints linked by cached
        intra-segment optimal paths) and the sphere graph inside the
        terminal segments. Returns ``None`` when the goal is disconnected;
        raises :class:`PlanQueryError` when an endpoint cannot be attached
        to any sphere.
        """
        if c_r < 0.0:
            raise PlanQueryError("risk avoidance must be non-negative")
        p1 = np.asarray(p1, dtype=float)
        p2 = np.asarray(p2, dtype=float)
        if float(np.linalg.norm(p1 - p2)) < 1e-12:
            return PlanResult([], np.vstack([p1, p2]), PathCost(0.0, 0.0, c_r))
        att1 = self._attach(p1)
        att2 = self._attach(p2)

        segs1 = sorted({self.segment_of[s] for s in att1})
        segs2 = sorted({self.segment_of[s] for s in att2})

        # meta graph over boundary spheres plus virtual endpoints -1 / -2
        meta_edges: dict[int, list[tuple[int, float, float, float, list[int]]]] = {}

        def add_edge(a, b, cost, length, risk, path):
            meta_edges.setdefault(a, []).append((b, cost, length, risk, path))

        for seg in sorted(self.segments.keys()):
            boundary = self._boundary_spheres(seg)
            table = self._segment_table(seg, c_r)
            for u in boundary:
                reach = table[u]
                for v in boundary:
                    if v == u or v not in reach:
                        continue
                    cost, length, risk, path = reach[v]
                    add_edge(u, v, cost, length, risk, path)
        for (_, _), (u, v) in sorted(self.portals.items()):
            dl, dr = self._edge_cost(u, v)
            add_edge(u, v, dl + c_r * dr, dl, dr, [u, v])
            add_edge(v, u, dl + c_r * dr, dl, dr, [v, u])
        for seg in segs1:
            attach = [s for s in att1 if self.segment_of[s] == seg]
            reach = self._segment_dijkstra(seg, -1, c_r, virtual=(p1, attach))
            for v in self._boundary_spheres(seg):
                if v in reach:
                    cost, length, risk, path = reach[v]
                    add_edge(-1, v, cost, length, risk, path)
        for seg in segs2:
            attach = [s for s in att2 if self.segment_of[s] == seg]
            reach = self._segment_dijkstra(seg, -2, c_r, virtual=(p2, attach))
            for v in self._boundary_spheres(seg):
                if v in reach:
                    cost, length, risk, path = reach[v]
                    add_edge(v, -2, cost, length, risk, list(reversed(path)))
        # direct same-segment route p1 -> p2
        shared = sorted(set(segs1) & set(segs2))
        for seg in shared:
            attach1 = [s for s in att1 if self.segment_of[s] == seg]
            attach2 = {s for s in att2 if self.segment_of[s] == seg}
            reach = self._segment_dijkstra(seg, -1, c_r, virtual=(p1, attach1))
            best = None
            for s in sorted(attach2):
                if s not in reach:
                    continue
                cost, length, risk, path = reach[s]
                tail = float(np.linalg.norm(p2 - self.centers[s]))
                w = risk_weight(self.radii[s], self.cfg.min_radius, self.cfg.safe_radius)
                tot = cost + tail + c_r * tail * w
                if best is None or tot < best[1]:
                    best = (s, tot, length + tail, risk + tail * w, path)
            if best is not None:
                _, cost, length, risk, path = best
                add_edge(-1, -2, cost, length, risk, path)

        # Dijkstra over the meta graph
        dist: dict[int, tuple[float, float, float, list[int]]] = {}
        heap = [(0.0, -1, 0.0, 0.0, ())]
        while heap:
            cost, node, length, risk, path = heapq.heappop(heap)
            if node in dist:
                continue
            dist[node] = (cost, length, risk, list(path))
            if node == -2:
                break
            for (nxt, ecost, el, er, epath) in meta_edges.get(node, []):
                if nxt in dist:
                    continue
                seq = path + tuple(epath)
                heapq.heappush(heap, (cost + ecost, nxt, length + el, risk + er, seq))
        if -2 not in dist:
            return None
        cost, length, risk, raw_path = dist[-2]
        sphere_path = []
        for sid in raw_path:
            if not sphere_path or sphere_path[-1] != sid:
                sphere_path.append(sid)
        pts = [p1] + [self.centers[s] for s in sphere_path] + [p2]
        return PlanResult(sphere_path, np.vstack(pts), PathCost(length, risk, c_r))

    def _attach(self, p: np.ndarray) -> list[int]:
        inside = self.containing_spheres(p)
        if inside:
            return inside
        best = None
        for i in self.sphere_ids():
            gap = float(np.linalg.norm(p - self.centers[i])) - self.radii[i]
            if best is None or gap < best[1]:
                best = (i, gap)
        if best is not None and best[1] <= self.cfg.snap_epsilon:
            return [best[0]]
        raise PlanQueryError(f"point {p} lies outside the sphere graph")

    # -- export ----------------------------------------------------------------

    def to_csv(self) -> str:
        lines = ["kind,id,a,b,x,y,z,radius,segment"]
        for sid in self.sphere_ids():
            c = self.centers[sid]
            lines.append(f"sphere,{sid},,,{c[0]:.3f},{c[1]:.3f},{c[2]:.3f},"
                         f"{self.radii[sid]:.3f},{self.segment_of.get(sid, -1)}")
        for (sa, sb), (u, v) in sorted(self.portals.items()):
            mid = (self.centers[u] + self.centers[v]) / 2.0
            lines.append(f"portal,,{u},{v},{mid[0]:.3f},{mid[1]:.3f},{mid[2]:.3f},,"
                         f"{sa}|{sb}")
        return "\n".join(lines) + "\n"
