"""Local navigation: voxel-grid A* with clearance feasibility and node
pruning, iterative path shifting, time-parameterized trajectories, and
carrot-style following of long sphere-graph routes with collision checks.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .densemap import ObstacleIndex

_SQRT2 = math.sqrt(2.0)
_SQRT3 = math.sqrt(3.0)

# 26-connected move set, costs in cell units
_MOVES = np.array([
    (dx, dy, dz)
    for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
], dtype=np.int64)
_MOVE_COST = np.linalg.norm(_MOVES, axis=1)

# natural successor table (per incoming move): component-subset moves that
# keep progressing toward the incoming direction; used to prune expansions
# in fully free neighborhoods, like jump point search
_NATURAL: list[np.ndarray] = []
for _m in _MOVES:
    nat = []
    for _j, _cand in enumerate(_MOVES):
        if np.all((_cand == 0) | (_cand == _m)) and np.any(_cand != 0):
            nat.append(_j)
    _NATURAL.append(np.array(nat, dtype=np.int64))


@dataclass
class Grid:
    """Axis-aligned voxel lattice used by the local planner."""

    origin: np.ndarray          # world position of cell (0,0,0) corner
    resolution: float
    shape: tuple[int, int, int]

    def cell_of(self, p: np.ndarray) -> tuple[int, int, int]:
        idx = np.floor((np.asarray(p, dtype=float) - self.origin)
                       / self.resolution).astype(np.int64)
        return tuple(int(v) for v in idx)

    def center_of(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def contains(self, idx) -> bool:
        return all(0 <= idx[i] < self.shape[i] for i in range(3))

    def all_centers(self) -> np.ndarray:
        nx, ny, nz = self.shape
        gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        idx = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        return self.origin + (idx + 0.5) * self.resolution


def feasibility_mask(grid: Grid, obstacles: ObstacleIndex, d_safe: float) -> np.ndarray:
    """Cell feasibility by nearest-obstacle distance (vectorized)."""
    clear = obstacles.clearance(grid.all_centers())
    return (clear >= d_safe).reshape(grid.shape)


class PlanFailure(Exception):
    def __init__(self, status: str):
        self.status = status
        super().__init__(status)


def _heuristic(d: np.ndarray) -> float:
    a = np.sort(np.abs(d))[::-1]
    return float(a[0] + (_SQRT2 - 1.0) * a[1] + (_SQRT3 - _SQRT2) * a[2])


def astar_plan(feasible: np.ndarray, start: tuple[int, int, int],
               goal: tuple[int, int, int], *, pruning: bool = True,
               max_expansions: int = 2_000_000
               ) -> tuple[list[tuple[int, int, int]], float]:
    """26-connected A* over a feasibility mask, cost in cell units.

    Expansions in fully-free neighborhoods are pruned to the successors
    that keep progressing along the incoming direction; any blocked or
    out-of-bounds neighbor restores the full move set, which preserves
    optimality. Raises :class:`PlanFailure` ("unreachable" / "timeout" /
    "invalid") when no path exists.
    """
    shape = feasible.shape
    if not (0 <= start[0] < shape[0] and 0 <= start[1] < shape[1]
            and 0 <= start[2] < shape[2]) or not feasible[start]:
        raise PlanFailure("invalid")
    if not (0 <= goal[0] < shape[0] and 0 <= goal[1] < shape[1]
            and 0 <= goal[2] < shape[2]) or not feasible[goal]:
        raise PlanFailure("unreachable")
    if start == goal:
        return [start], 0.0

    nx, ny, nz = shape
    strides = np.array([ny * nz, nz, 1], dtype=np.int64)
    flat = feasible.reshape(-1)
    move_flat = _MOVES @ strides
    start_f = int(np.asarray(start, dtype=np.int64) @ strides)
    goal_f = int(np.asarray(goal, dtype=np.int64) @ strides)
    goal_arr = np.asarray(goal, dtype=np.int64)

    g = {start_f: 0.0}
    parent: dict[int, int] = {}
    closed: set[int] = set()
    counter = itertools.count()
    h0 = _heuristic(np.asarray(start, dtype=np.int64) - goal_arr)
    heap = [(h0, next(counter), start_f, -1)]
    expansions = 0

    def coords(f: int) -> np.ndarray:
        return np.array([f // (ny * nz), (f // nz) % ny, f % nz], dtype=np.int64)

    while heap:
        _, _, node, incoming = heapq.heappop(heap)
        if node in closed:
            continue
        closed.add(node)
        if node == goal_f:
            path = [node]
            while path[-1] in parent:
                path.append(parent[path[-1]])
            cells = [tuple(int(v) for v in coords(f)) for f in reversed(path)]
            return cells, g[goal_f]
        expansions += 1
        if expansions > max_expansions:
            raise PlanFailure("timeout")

        c = coords(node)
        # interior test plus free-neighborhood test for pruning
        interior = np.all((c >= 1) & (c < np.asarray(shape) - 1))
        if interior:
            neigh = node + move_flat
            neigh_free = flat[neigh]
            open_space = bool(np.all(neigh_free))
        else:
            open_space = False
            neigh = None
            neigh_free = None
        if pruning and open_space and incoming >= 0:
            moves = _NATURAL[incoming]
        else:
            moves = np.arange(len(_MOVES))

        base_g = g[node]
        for j in moves:
            if interior:
                nf = int(neigh[j])
                if not neigh_free[j]:
                    continue
            else:
                nc = c + _MOVES[j]
                if not (0 <= nc[0] < nx and 0 <= nc[1] < ny and 0 <= nc[2] < nz):
                    continue
                nf = int(nc @ strides)
                if not flat[nf]:
                    continue
            if nf in closed:
                continue
            ng = base_g + _MOVE_COST[j]
            if ng < g.get(nf, math.inf) - 1e-12:
                g[nf] = ng
                parent[nf] = node
                h = _heuristic(coords(nf) - goal_arr)
                heapq.heappush(heap, (ng + h, next(counter), nf, int(j)))
    raise PlanFailure("unreachable")


def dijkstra_grid_costs(feasible: np.ndarray, start: tuple[int, int, int]) -> dict:
    """Plain Dijkstra distances from start over the same move set.

    Reference implementation used to audit the pruned planner.
    """
    shape = feasible.shape
    nx, ny, nz = shape
    strides = np.array([ny * nz, nz, 1], dtype=np.int64)
    flat = feasible.reshape(-1)
    start_f = int(np.asarray(start, dtype=np.int64) @ strides)
    dist = {start_f: 0.0}
    heap = [(0.0, start_f)]
    move_flat = _MOVES @ strides
    done = set()
    while heap:
        d, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        c = np.array([node // (ny * nz), (node // nz) % ny, node % nz])
        for j in range(len(_MOVES)):
            nc = c + _MOVES[j]
            if not (0 <= nc[0] < nx and 0 <= nc[1] < ny and 0 <= nc[2] < nz):
                continue
            nf = int(nc @ strides)
            if not flat[nf] or nf in done:
                continue
            nd = d + _MOVE_COST[j]
            if nd < dist.get(nf, math.inf) - 1e-12:
                dist[nf] = nd
                heapq.heappush(heap, (nd, nf))
    return dist


# -- path post-processing ------------------------------------------------------


def postprocess_path(points: np.ndarray, obstacles: ObstacleIndex,
                     max_spacing: float, iters: int = 16,
                     step: float = 0.1) -> np.ndarray:
    """Iteratively shift interior waypoints away from the nearest obstacle.

    A move is kept only when it strictly improves that waypoint's
    clearance, so the path minimum clearance never decreases; spacing above
    the connectivity bound is fixed by midpoint insertion afterwards.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float)).copy()
    if len(pts) < 3 or len(obstacles) == 0:
        return pts
    for _ in range(iters):
        moved = False
        clear = obstacles.clearance(pts)
        for i in range(1, len(pts) - 1):
            _, nn = obstacles._tree.query(pts[i])
            away = pts[i] - obstacles.centers[nn]
            norm = float(np.linalg.norm(away))
            if norm < 1e-9:
                continue
            cand = pts[i] + away / norm * step
            cand_clear = float(obstacles.clearance(cand[None, :])[0])
            if cand_clear <= clear[i] + 1e-9:
                continue
            if (np.linalg.norm(cand - pts[i - 1]) > max_spacing
                    or np.linalg.norm(cand - pts[i + 1]) > max_spacing):
                continue
            pts[i] = cand
            clear[i] = cand_clear
            moved = True
        if not moved:
            break
    # restore the spacing bound by subdividing stretched segments
    out = [pts[0]]
    for i in range(1, len(pts)):
        seg = pts[i] - pts[i - 1]
        n = max(1, int(math.ceil(float(np.linalg.norm(seg)) / max_spacing)))
        for k in range(1, n):
            out.append(pts[i - 1] + seg * (k / n))
        out.append(pts[i])
    return np.vstack(out)


# -- trajectory generation ----------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray           # (N,)
    positions: np.ndarray       # (N,3)
    velocities: np.ndarray      # (N,3)
    headings: np.ndarray        # (N,)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self.times) else 0.0

    @property
    def t_end(self) -> float:
        return float(self.times[-1]) if len(self.times) else 0.0

    def sample(self, t: float) -> tuple[np.ndarray, np.ndarray, float]:
        """(position, velocity, heading) at time t, clamped to the ends."""
        ts = self.times
        if t <= ts[0]:
            return self.positions[0].copy(), self.velocities[0].copy(), float(self.headings[0])
        if t >= ts[-1]:
            return self.positions[-1].copy(), np.zeros(3), float(self.headings[-1])
        i = int(np.searchsorted(ts, t) - 1)
        a = (t - ts[i]) / (ts[i + 1] - ts[i])
        pos = self.positions[i] * (1 - a) + self.positions[i + 1] * a
        vel = self.velocities[i] * (1 - a) + self.velocities[i + 1] * a
        h0, h1 = self.headings[i], self.headings[i + 1]
        dh = math.atan2(math.sin(h1 - h0), math.cos(h1 - h0))
        return pos, vel, float(h0 + a * dh)


class InfeasibleLimits(ValueError):
    pass


_ARC_ACCEL_BUDGET = 0.7      # centripetal fraction of a_max on corner arcs


def _round_corners(pts: np.ndarray, corridor: float) -> tuple[np.ndarray, np.ndarray]:
    """Replace sharp corners with circular arcs inside the corridor.

    Returns densified points and per-point curvature. Arc radius is capped
    by the corridor so the rounded path stays within it.
    """
    out_pts = [pts[0]]
    out_kappa = [0.0]
    for i in range(1, len(pts) - 1):
        a, b, c = pts[i - 1], pts[i], pts[i + 1]
        v1, v2 = b - a, c - b
        l1, l2 = np.linalg.norm(v1), np.linalg.norm(v2)
        if l1 < 1e-9 or l2 < 1e-9:
            continue
        u1, u2 = v1 / l1, v2 / l2
        cosang = float(np.clip(u1 @ u2, -1.0, 1.0))
        theta = math.acos(cosang)            # turn angle
        if theta < 1e-3:
            out_pts.append(b)
            out_kappa.append(0.0)
            continue
        half = (math.pi - theta) / 2.0
        radius = min(corridor, 0.45 * min(l1, l2) * math.tan(half))
        if radius < 1e-6:
            out_pts.append(b)
            out_kappa.append(1.0 / max(corridor, 1e-6))
            continue
        t_len = radius / math.tan(half)      # tangent length along each leg
        p_in = b - u1 * t_len
        p_out = b + u2 * t_len
        out_pts.append(p_in)
        out_kappa.append(0.0)
        # sample the arc
        n_arc = max(2, int(math.ceil(theta / 0.2)))
        for k in range(1, n_arc):
            s = k / n_arc
            # de Casteljau on the circular arc approximated by slerp of tangents
            ang = theta * s
            # rotate u1 toward u2 in their common plane
            axis = np.cross(u1, u2)
            nrm = np.linalg.norm(axis)
            if nrm < 1e-12:
                break
            axis = axis / nrm
            ca, sa = math.cos(ang), math.sin(ang)
            u_rot = (u1 * ca + np.cross(axis, u1) * sa
                     + axis * (axis @ u1) * (1 - ca))
            # chord construction along the arc
            prev = out_pts[-1]
            out_pts.append(prev + u_rot * (theta * radius / n_arc))
            out_kappa.append(1.0 / radius)
        out_pts.append(p_out)
        out_kappa.append(0.0)
    out_pts.append(pts[-1])
    out_kappa.append(0.0)
    return np.vstack(out_pts), np.asarray(out_kappa)


def generate_trajectory(points: np.ndarray, v_max: float, a_max: float,
                        corridor: float, dt: float = 0.05, v0: float = 0.0,
                        t0: float = 0.0, end_heading: float | None = None
                        ) -> Trajectory:
    """Time-parameterize a waypoint path with a trapezoidal speed profile.

    Corners are rounded with arcs that fit the corridor; speed on an arc is
    capped so centripetal acceleration stays within budget, and the
    tangential profile respects v_max / a_max. The first sample matches the
    path start and ``v0`` so a replan splices continuously onto the
    trajectory being flown.
    """
    if v_max <= 0.0 or a_max <= 0.0:
        raise InfeasibleLimits("speed and acceleration limits must be positive")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) >= 2:
        keep = [0]
        for i in range(1, len(pts)):
            if np.linalg.norm(pts[i] - pts[keep[-1]]) > 1e-9:
                keep.append(i)
        pts = pts[keep]
    if len(pts) < 2:
        p = pts[0] if len(pts) else np.zeros(3)
        h = end_heading if end_heading is not None else 0.0
        return Trajectory(np.array([t0]), p[None, :], np.zeros((1, 3)),
                          np.array([h]))

    rounded, kappa = _round_corners(pts, corridor)
    seg = np.diff(rounded, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    ok = seg_len > 1e-12
    seg, seg_len = seg[ok], seg_len[ok]
    rounded = np.vstack([rounded[0], rounded[1:][ok]])
    kappa = np.concatenate([[kappa[0]], kappa[1:][ok]])
    s_grid = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = float(s_grid[-1])

    # fine arc-length grid
    ds = max(min(0.02, v_max * dt / 4.0), total / 20000.0)
    s_fine = np.arange(0.0, total, ds)
    s_fine = np.append(s_fine, total)
    kappa_fine = np.interp(s_fine, s_grid, kappa)

    v_lim = np.full(len(s_fine), v_max)
    curved = kappa_fine > 1e-9
    v_lim[curved] = np.minimum(
        v_lim[curved], np.sqrt(_ARC_ACCEL_BUDGET * a_max / kappa_fine[curved]))
    a_tan = np.where(curved, a_max * math.sqrt(1.0 - _ARC_ACCEL_BUDGET ** 2), a_max)

    v = v_lim.copy()
    v[0] = min(v0, v_lim[0])
    for i in range(1, len(v)):
        v[i] = min(v[i], math.sqrt(v[i - 1] ** 2 + 2.0 * a_tan[i - 1] * ds))
    v[-1] = 0.0
    for i in range(len(v) - 2, -1, -1):
        v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2.0 * a_tan[i] * ds))

    # time at each arc-length sample
    t_grid = np.zeros(len(s_fine))
    for i in range(1, len(s_fine)):
        v_avg = max(0.5 * (v[i - 1] + v[i]), 1e-6)
        t_grid[i] = t_grid[i - 1] + (s_fine[i] - s_fine[i - 1]) / v_avg

    duration = float(t_grid[-1])
    times = np.arange(0.0, duration, dt)
    times = np.append(times, duration)
    s_at_t = np.interp(times, t_grid, s_fine)
    v_at_t = np.interp(s_at_t, s_fine, v)

    # positions along the polyline at the sampled arc lengths
    seg_idx = np.clip(np.searchsorted(s_grid, s_at_t, side="right") - 1,
                      0, len(seg_len) - 1)
    frac = (s_at_t - s_grid[seg_idx]) / seg_len[seg_idx]
    positions = rounded[seg_idx] + seg[seg_idx] * frac[:, None]
    tangents = seg[seg_idx] / seg_len[seg_idx, None]
    velocities = tangents * v_at_t[:, None]
    headings = np.arctan2(tangents[:, 1], tangents[:, 0])
    flat = np.linalg.norm(tangents[:, :2], axis=1) < 1e-6
    if np.any(flat):
        # vertical motion keeps the previous heading
        for i in np.flatnonzero(flat):
            headings[i] = headings[i - 1] if i > 0 else (
                end_heading if end_heading is not None else 0.0)
    if end_heading is not None:
        headings[-1] = end_heading
    return Trajectory(times + t0, positions, velocities, headings)


# -- long-distance following -----------------------------------------------------


@dataclass
class NavConfig:
    d_safe: float = 0.6
    v_max: float = 2.0
    a_max: float = 2.0
    dt: float = 0.05
    corridor: float = 0.6
    carrot_distance: float = 20.0
    replan_period: float = 2.0           # 0.5 Hz
    collision_period: float = 0.2        # 5 Hz
    plan_lead_time: float = 0.6          # T_s
    progress_timeout: float = 30.0
    avoid_distance: float = 4.0
    avoid_descend: float = 1.5
    shift_iters: int = 16
    local_span: float = 24.0             # local grid edge length


@dataclass
class NavStatus:
    trajectory: Trajectory | None
    unreachable: bool = False
    stopped: bool = False
    replanned: bool = False


class Follower:
    """Carrot-and-stick consumer of a long sphere-graph route.

    Slides a near goal (the carrot) along the route, replans a local grid
    path to it on a fixed cadence, checks the flown trajectory against the
    newest map at a faster cadence, and raises an unreachability flag when
    no progress is being made.
    """

    def __init__(self, cfg: NavConfig, resolution: float):
        self.cfg = cfg
        self.resolution = resolution
        self.route: np.ndarray | None = None
        self.goal_heading: float | None = None
        self.trajectory: Trajectory | None = None
        self._last_replan = -math.inf
        self._last_check = -math.inf
        self._best_goal_dist = math.inf
        self._progress_t = 0.0
        self.unreachable = False

    def set_route(self, points: np.ndarray, t: float,
                  goal_heading: float | None = None) -> None:
        self.route = np.atleast_2d(np.asarray(points, dtype=float))
        self.goal_heading = goal_heading
        self.unreachable = False
        self._best_goal_dist = math.inf
        self._progress_t = t
        self._last_replan = -math.inf

    def clear(self) -> None:
        self.route = None
        self.trajectory = None
        self.unreachable = False

    def carrot(self, position: np.ndarray) -> np.ndarray:
        """Furthest route point within the carrot distance (never > 20 m)."""
        route = self.route
        d = 0.0
        best = route[0]
        # walk the polyline accumulating distance from the nearest point
        dists = np.linalg.norm(route - position, axis=1)
        start = int(np.argmin(dists))
        best = route[start]
        for i in range(start + 1, len(route)):
            d += float(np.linalg.norm(route[i] - route[i - 1]))
            if dists[start] + d > self.cfg.carrot_distance:
                break
            best = route[i]
        return best

    def tick(self, t: float, position: np.ndarray, velocity: np.ndarray,
             obstacles: ObstacleIndex) -> NavStatus:
        if self.route is None:
            return NavStatus(self.trajectory)
        cfg = self.cfg
        goal = self.route[-1]
        gd = float(np.linalg.norm(goal - position))
        if gd < self._best_goal_dist - 0.25:
            self._best_goal_dist = gd
            self._progress_t = t
        if t - self._progress_t > cfg.progress_timeout:
            self.unreachable = True
            return NavStatus(self.trajectory, unreachable=True)

        replanned = False
        stopped = False
        if t - self._last_check >= cfg.collision_period:
            self._last_check = t
            if self.trajectory is not None and self._collision_ahead(t, obstacles):
                imminent = self._collision_time(t, obstacles) < 1.0
                if imminent:
                    self._stop_maneuver(t, position, velocity)
                    stopped = True
                self._last_replan = -math.inf    # force replan now
        if t - self._last_replan >= cfg.replan_period:
            self._last_replan = t
            replanned = self._replan(t, position, velocity, obstacles)
        return NavStatus(self.trajectory, unreachable=False,
                         stopped=stopped, replanned=replanned)

    def _predicted_start(self, t: float, position: np.ndarray,
                         velocity: np.ndarray) -> tuple[np.ndarray, float]:
        if self.trajectory is not None and t <= self.trajectory.t_end:
            pos, vel, _ = self.trajectory.sample(t + self.cfg.plan_lead_time)
            return pos, float(np.linalg.norm(vel))
        return np.asarray(position, dtype=float), float(np.linalg.norm(velocity))

    def _replan(self, t: float, position: np.ndarray, velocity: np.ndarray,
                obstacles: ObstacleIndex) -> bool:
        cfg = self.cfg
        start_pos, v0 = self._predicted_start(t, position, velocity)
        target = self.carrot(start_pos)
        span = cfg.local_span
        lo = np.minimum(start_pos, target) - span / 4.0
        hi = np.maximum(start_pos, target) + span / 4.0
        grid = Grid(lo, self.resolution,
                    tuple(int(math.ceil(v / self.resolution)) + 1 for v in (hi - lo)))
        feas = feasibility_mask(grid, obstacles, cfg.d_safe)
        s_idx = grid.cell_of(start_pos)
        g_idx = grid.cell_of(target)
        if not grid.contains(s_idx) or not grid.contains(g_idx):
            return False
        feas[s_idx] = True   # never strand the vehicle in an infeasible start cell
        try:
            cells, _ = astar_plan(feas, s_idx, g_idx)
        except PlanFailure:
            return False
        pts = np.array([grid.center_of(c) for c in cells])
        pts[0] = start_pos
        pts[-1] = target
        pts = postprocess_path(pts, obstacles, max_spacing=2.0 * self.resolution
                               * _SQRT3, iters=cfg.shift_iters)
        heading = self.goal_heading if np.allclose(target, self.route[-1]) else None
        self.trajectory = generate_trajectory(
            pts, cfg.v_max, cfg.a_max, cfg.corridor, cfg.dt, v0=v0, t0=t,
            end_heading=heading)
        return True

    def _collision_ahead(self, t: float, obstacles: ObstacleIndex) -> bool:
        return math.isfinite(self._collision_time(t, obstacles))

    def _collision_time(self, t: float, obstacles: ObstacleIndex) -> float:
        if self.trajectory is None or len(obstacles) == 0:
            return math.inf
        horizon = np.arange(t, min(t + 3.0, self.trajectory.t_end) + 1e-9, 0.25)
        if len(horizon) == 0:
            return math.inf
        pts = np.array([self.trajectory.sample(tt)[0] for tt in horizon])
        clear = obstacles.clearance(pts)
        bad = clear < self.cfg.d_safe * 0.9
        if not np.any(bad):
            return math.inf
        return float(horizon[int(np.argmax(bad))] - t)

    def _stop_maneuver(self, t: float, position: np.ndarray,
                       velocity: np.ndarray) -> None:
        """Straight-line stop at maximum deceleration from the current state."""
        v = float(np.linalg.norm(velocity))
        if v < 1e-6:
            self.trajectory = Trajectory(np.array([t]), position[None, :],
                                         np.zeros((1, 3)),
                                         np.array([0.0]))
            return
        direction = np.asarray(velocity) / v
        stop_dist = v * v / (2.0 * self.cfg.a_max)
        end = position + direction * stop_dist
        self.trajectory = generate_trajectory(
            np.vstack([position, end]), max(v, 0.1), self.cfg.a_max,
            self.cfg.corridor, self.cfg.dt, v0=v, t0=t)


@dataclass
class AvoidanceOverride:
    halt_lateral: bool
    descend: float


def avoid_collision(self_position: np.ndarray, self_velocity: np.ndarray,
                    self_priority: int,
                    peers: list[tuple[np.ndarray, np.ndarray, int]],
                    d_avoid: float = 4.0, descend: float = 1.5,
                    horizon: float = 3.0) -> AvoidanceOverride | None:
    """Priority collision avoidance: the lower-priority robot halts lateral
    motion and descends when predicted separation falls under d_avoid.

    Peers are (position, velocity, priority); lower number = higher
    priority.
    """
    p0 = np.asarray(self_position, dtype=float)
    v0 = np.asarray(self_velocity, dtype=float)
    for (pp, pv, prio) in peers:
        if prio >= self_priority:
            continue            # only yield to higher-priority robots
        rel_p = np.asarray(pp) - p0
        rel_v = np.asarray(pv) - v0
        # closest approach within the horizon
        vv = float(rel_v @ rel_v)
        t_star = 0.0 if vv < 1e-12 else float(np.clip(-(rel_p @ rel_v) / vv,
                                                      0.0, horizon))
        sep = float(np.linalg.norm(rel_p + rel_v * t_star))
        if sep < d_avoid:
            return AvoidanceOverride(halt_lateral=True, descend=descend)
    return None

