"""Informed search: viewpoint sampling and caching, information gains,
greedy / dead-end-inspection strategies, cooperative rewards over received
compact maps, the return condition, and robustness blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .densemap import CellState, DenseMap, ObstacleIndex, RayKind
from .facetmap import FacetMap
from .geometry import Pose, rot_z
from .ltvmap import LtvMap, membership_likelihood
from .sensors import RgbCameraModel
from .spheremap import PlanQueryError, SphereMap

UNREACHABLE = -math.inf


@dataclass
class SearchParams:
    c_frontier: float = 100.0
    c_surface: float = 1.0
    c_surface_flat: float = 5.0
    risk_avoidance: float = 1.0
    return_margin: float = 0.9
    info_threshold: float = 2.0
    viewpoint_spacing: float = 1.5
    local_box: float = 15.0
    strategy: str = "DEI"
    vpe: bool = False
    vpe_detour_budget: float = 0.15
    momentum_penalty: float = 2.0
    operator_bias: float = 1.0
    remote_cost_scale: float = 1.5
    blocked_eps: float = 1e-3
    dwell_block_time: float = 60.0
    goal_timeout: float = 30.0
    goal_block_radius: float = 2.0
    info_rays_rings: int = 8
    info_rays_azimuths: int = 24
    info_range: float = 10.0
    coverage_block_threshold: float = 0.95
    sample_count: int = 40
    min_clearance: float = 0.8
    global_prune_factor: float = 2.0


@dataclass
class Viewpoint:
    vid: int
    position: np.ndarray
    heading: float
    info: float
    kind: str                       # "frontier" | "surface"
    is_global: bool = False
    blocked: bool = False
    blocked_reason: str = ""
    visited_likelihood: float = 0.0

    def pose(self) -> Pose:
        return Pose(self.position.copy(), rot_z(self.heading))


class GoalMode(Enum):
    LOCAL = "local"
    GLOBAL = "global"
    RETURN = "return"
    NONE = "none"


@dataclass
class GoalDecision:
    mode: GoalMode
    viewpoints: list[Viewpoint] = field(default_factory=list)
    reason: str = ""


def info_frontier(position: np.ndarray, densemap: DenseMap, rays: np.ndarray,
                  max_range: float, c_frontier: float) -> tuple[float, np.ndarray]:
    """Frontier information: c_F times the fraction of sensor-FOV rays that
    reach unknown space before an occupied cell or range end.

    Also returns the mean direction of the unknown-hitting rays (used to
    aim the viewpoint heading).
    """
    kinds, _ = densemap.classify_rays(np.asarray(position, dtype=float), rays, max_range)
    unk = kinds == int(RayKind.UNKNOWN)
    ratio = float(np.mean(unk)) if len(kinds) else 0.0
    if np.any(unk):
        mean_dir = rays[unk].mean(axis=0)
    else:
        mean_dir = np.zeros(3)
    return c_frontier * ratio, mean_dir


def info_surface(pose: Pose, fmap: FacetMap, densemap: DenseMap,
                 camera: RgbCameraModel, c_surface: float,
                 c_surface_flat: float) -> tuple[float, int]:
    """Surface information: c_S per uncovered facet the cameras would newly
    cover from this pose, plus the flat term."""
    n_unc = fmap.coverage_gain(pose, camera, densemap)
    return c_surface * n_unc + c_surface_flat, n_unc


def reward_gs(info: float, travel_cost: float) -> float:
    """Greedy reward: information minus path cost; unreachable is -inf."""
    if not math.isfinite(travel_cost):
        return UNREACHABLE
    return info - travel_cost


def reward_dei(info: float, travel_cost: float, home_to_goal: float,
               home_to_uav: float) -> float:
    """Depth-biased reward: greedy plus the gain in distance from home."""
    if not (math.isfinite(travel_cost) and math.isfinite(home_to_goal)
            and math.isfinite(home_to_uav)):
        return UNREACHABLE
    return info - travel_cost + (home_to_goal - home_to_uav)


def remote_hop_cost(ltv: LtvMap, from_point: np.ndarray, via_segment: int,
                    frontier_position: np.ndarray, frontier_segment: int,
                    scale: float) -> float:
    """Segment-center hop estimate of travel cost inside a received map.

    Sums Euclidean hops from ``from_point`` through the center of the entry
    segment, across the segment adjacency graph, to the frontier, scaled by
    the remote-uncertainty factor.
    """
    import heapq

    centers = {seg.sid: np.asarray(seg.center) for seg in ltv.segments}
    if via_segment not in centers or frontier_segment not in centers:
        return math.inf
    adj = {seg.sid: seg.adjacency for seg in ltv.segments}
    start_cost = float(np.linalg.norm(np.asarray(from_point) - centers[via_segment]))
    heap = [(start_cost, via_segment)]
    seen: dict[int, float] = {}
    while heap:
        cost, node = heapq.heappop(heap)
        if node in seen:
            continue
        seen[node] = cost
        if node == frontier_segment:
            break
        for nxt in adj.get(node, ()):
            if nxt in seen or nxt not in centers:
                continue
            heapq.heappush(heap, (cost + float(np.linalg.norm(
                centers[node] - centers[nxt])), nxt))
    if frontier_segment not in seen:
        return math.inf
    total = seen[frontier_segment] + float(np.linalg.norm(
        centers[frontier_segment] - np.asarray(frontier_position)))
    return scale * total


def coop_reward(local_reward: float, likelihood_local: float,
                uav_to_frontier_cost: float, frontier_position: np.ndarray,
                received: list[LtvMap], params: SearchParams) -> float:
    """Blend of the local strategy reward and the best remote-frontier
    reward reachable through this local frontier.

    remote term per received map M: I(xi_R) - D(uav, xi_L)
    - D_R(xi_L, xi_R, entry segment) / (1 - l(xi_R)); frontiers with
    l >= 1 - eps are excluded entirely.
    """
    l = likelihood_local
    if l <= 0.0:
        return local_reward
    best_remote = UNREACHABLE
    for m in received:
        # the most likely segment this local frontier belongs to in M
        entry, entry_l = None, 0.0
        pt = np.asarray(frontier_position)[None, :]
        for seg in m.segments:
            v = float(seg.membership(pt)[0])
            if v > entry_l:
                entry, entry_l = seg.sid, v
        if entry is None:
            continue
        for fr in m.frontiers:
            if fr.visited_likelihood >= 1.0 - params.blocked_eps:
                continue
            d_r = remote_hop_cost(m, frontier_position, entry,
                                  np.asarray(fr.position), fr.segment,
                                  params.remote_cost_scale)
            if not math.isfinite(d_r) or not math.isfinite(uav_to_frontier_cost):
                continue
            value = (fr.info - uav_to_frontier_cost
                     - d_r / (1.0 - fr.visited_likelihood))
            best_remote = max(best_remote, value)
    if best_remote == UNREACHABLE:
        # nothing reachable beyond: fall back fully to the local term
        return (1.0 - l) * local_reward
    return l * best_remote + (1.0 - l) * local_reward


class VisitedTracker:
    """Dwell-time map; long hovering near a spot blocks sampling there."""

    def __init__(self, block_time: float, cell: float = 1.0):
        self.block_time = block_time
        self.cell = cell
        self.dwell: dict[tuple[int, int, int], float] = {}

    def _key(self, p: np.ndarray) -> tuple[int, int, int]:
        return tuple(int(math.floor(v / self.cell)) for v in np.asarray(p))

    def update(self, position: np.ndarray, dt: float) -> None:
        k = self._key(position)
        self.dwell[k] = self.dwell.get(k, 0.0) + dt

    def multiplier(self, position: np.ndarray) -> float:
        d = self.dwell.get(self._key(position), 0.0)
        return max(0.0, 1.0 - d / self.block_time)

    def sampling_blocked(self, position: np.ndarray) -> bool:
        return self.multiplier(position) <= 0.0


class ProgressWatch:
    """Raises a timeout block when distance to goal stops improving."""

    def __init__(self, timeout: float):
        self.timeout = timeout
        self.goal: np.ndarray | None = None
        self.best = math.inf
        self.since = 0.0

    def start(self, goal: np.ndarray, t: float) -> None:
        self.goal = np.asarray(goal, dtype=float)
        self.best = math.inf
        self.since = t

    def stop(self) -> None:
        self.goal = None

    def check(self, position: np.ndarray, t: float) -> bool:
        """True when the current goal just timed out."""
        if self.goal is None:
            return False
        d = float(np.linalg.norm(np.asarray(position) - self.goal))
        if d < self.best - 0.25:
            self.best = d
            self.since = t
            return False
        return (t - self.since) > self.timeout


class SearchPlanner:
    """Viewpoint cache plus goal selection for one robot."""

    def __init__(self, params: SearchParams, camera: RgbCameraModel,
                 home: np.ndarray):
        self.params = params
        self.camera = camera
        self.home = np.asarray(home, dtype=float)
        self.cache: dict[int, Viewpoint] = {}
        self._next_vid = 0
        self.visited = VisitedTracker(params.dwell_block_time)
        self.progress = ProgressWatch(params.goal_timeout)
        self.blocked_regions: list[tuple[np.ndarray, float]] = []
        self.received_maps: dict[int, LtvMap] = {}
        self.explore_bias: np.ndarray | None = None
        self._info_rays = self._build_rays()

    def _build_rays(self) -> np.ndarray:
        p = self.params
        el = np.deg2rad(np.linspace(-60.0, 60.0, p.info_rays_rings))
        az = np.linspace(0.0, 2.0 * math.pi, p.info_rays_azimuths, endpoint=False)
        ce, se = np.cos(el), np.sin(el)
        ca, sa = np.cos(az), np.sin(az)
        return np.stack([
            np.outer(ce, ca).ravel(),
            np.outer(ce, sa).ravel(),
            np.repeat(se, p.info_rays_azimuths),
        ], axis=1)

    # -- robustness blocks ------------------------------------------------

    def block_region(self, center: np.ndarray, radius: float, reason: str) -> None:
        self.blocked_regions.append((np.asarray(center, dtype=float), radius))
        for vp in self.cache.values():
            if np.linalg.norm(vp.position - center) <= radius:
                vp.blocked = True
                vp.blocked_reason = reason

    def reset_blocks(self) -> None:
        """Operator reset: clears region blocks and blocked flags."""
        self.blocked_regions.clear()
        for vp in self.cache.values():
            vp.blocked = False
            vp.blocked_reason = ""

    def _in_blocked_region(self, p: np.ndarray) -> bool:
        return any(np.linalg.norm(p - c) <= r for c, r in self.blocked_regions)

    # -- cache maintenance --------------------------------------------------

    def cache_update(self, robot_pose: Pose, densemap: DenseMap, fmap: FacetMap,
                     obstacles: ObstacleIndex, rng: np.random.Generator) -> None:
        """Sample, score, and prune cached viewpoints around the robot."""
        p = self.params
        pos = robot_pose.position
        half = p.local_box / 2.0

        # demote viewpoints that fell outside the local box; refresh local ones
        for vp in list(self.cache.values()):
            local = bool(np.all(np.abs(vp.position - pos) <= half))
            if local:
                vp.is_global = False
                self._rescore(vp, densemap, fmap)
                threshold = p.info_threshold
            else:
                vp.is_global = True
                self._rescore(vp, densemap, fmap)
                threshold = p.info_threshold * p.global_prune_factor
            if vp.info < threshold or self._uninformative(vp):
                del self.cache[vp.vid]

        candidates = [pos + np.array([0.0, 0.0, 0.0])]
        candidates.extend(rng.uniform(pos - half, pos + half, size=(p.sample_count, 3)))
        for cand in candidates:
            cand = np.asarray(cand, dtype=float)
            if densemap.state_at(cand) != CellState.FREE:
                continue
            if float(obstacles.clearance(cand[None, :])[0]) < p.min_clearance:
                continue
            if self.visited.sampling_blocked(cand):
                continue
            if self._in_blocked_region(cand):
                continue
            vp = self._score_candidate(cand, densemap, fmap)
            if vp is None or vp.info < p.info_threshold:
                continue
            vp.info *= self.visited.multiplier(cand)
            if vp.info < p.info_threshold:
                continue
            # spacing: reject near an equal-or-better stored viewpoint,
            # replace strictly worse neighbors
            keep = True
            for other in list(self.cache.values()):
                if np.linalg.norm(other.position - vp.position) < p.viewpoint_spacing:
                    if other.info >= vp.info:
                        keep = False
                        break
                    del self.cache[other.vid]
            if keep:
                vp.vid = self._next_vid
                self._next_vid += 1
                self.cache[vp.vid] = vp

    def _score_candidate(self, cand: np.ndarray, densemap: DenseMap,
                         fmap: FacetMap) -> Viewpoint | None:
        p = self.params
        fr_info, unk_dir = info_frontier(cand, densemap, self._info_rays,
                                         p.info_range, p.c_frontier)
        heading = math.atan2(unk_dir[1], unk_dir[0]) if np.linalg.norm(unk_dir) > 1e-9 \
            else 0.0
        pose = Pose(cand, rot_z(heading))
        surf_info, n_unc = info_surface(pose, fmap, densemap, self.camera,
                                        p.c_surface, p.c_surface_flat)
        if fr_info >= surf_info or n_unc == 0:
            return Viewpoint(-1, cand, heading, fr_info, "frontier")
        return Viewpoint(-1, cand, heading, surf_info, "surface")

    def _rescore(self, vp: Viewpoint, densemap: DenseMap, fmap: FacetMap) -> None:
        p = self.params
        if vp.kind == "frontier":
            vp.info, _ = info_frontier(vp.position, densemap, self._info_rays,
                                       p.info_range, p.c_frontier)
        else:
            surf, n_unc = info_surface(vp.pose(), fmap, densemap, self.camera,
                                       p.c_surface, p.c_surface_flat)
            vp.info = surf if n_unc > 0 else 0.0

    def _uninformative(self, vp: Viewpoint) -> bool:
        return vp.info <= 0.0

    # -- rewards ------------------------------------------------------------

    def update_received(self, maps: dict[int, LtvMap]) -> None:
        self.received_maps = dict(maps)
        for vp in self.cache.values():
            if vp.kind != "frontier":
                continue
            l = 0.0
            for m in self.received_maps.values():
                l = max(l, membership_likelihood(vp.position, m))
            vp.visited_likelihood = l
            if l >= 1.0 - self.params.blocked_eps:
                vp.blocked = True
                vp.blocked_reason = "explored by peer"

    def strategy_reward(self, vp: Viewpoint, smap: SphereMap, uav: np.ndarray,
                        heading: float, local: bool) -> float:
        p = self.params
        d = self._path_cost(smap, uav, vp.position)
        if not math.isfinite(d):
            return UNREACHABLE
        if p.strategy == "GS":
            base = reward_gs(vp.info, d)
        else:
            home_goal = self._path_cost(smap, self.home, vp.position)
            home_uav = self._path_cost(smap, self.home, uav)
            base = reward_dei(vp.info, d, home_goal, home_uav)
        if base == UNREACHABLE:
            return UNREACHABLE
        if local and p.momentum_penalty > 0.0:
            to_vp = vp.position - uav
            if np.linalg.norm(to_vp[:2]) > 1e-6:
                delta = abs(math.atan2(to_vp[1], to_vp[0]) - heading)
                delta = min(delta, 2.0 * math.pi - delta)
                base -= p.momentum_penalty * (1.0 - math.cos(delta))
        if self.explore_bias is not None:
            base -= p.operator_bias * float(np.linalg.norm(
                vp.position - self.explore_bias))
        if vp.kind == "frontier" and vp.visited_likelihood > 0.0 and self.received_maps:
            base = coop_reward(base, vp.visited_likelihood, d, vp.position,
                               list(self.received_maps.values()), p)
        return base

    def _path_cost(self, smap: SphereMap, a: np.ndarray, b: np.ndarray) -> float:
        try:
            plan = smap.plan(a, b, self.params.risk_avoidance)
        except PlanQueryError:
            return math.inf
        if plan is None:
            return math.inf
        return plan.cost.total

    # -- goal selection --------------------------------------------------------

    def select_goal(self, robot_pose: Pose, smap: SphereMap,
                    t_battery: float, operator_return: bool = False,
                    return_position: np.ndarray | None = None,
                    avg_speed: float = 1.0) -> GoalDecision:
        """Local 2-viewpoint sequence, else best global goal, else RETURN.

        Returning fires when the operator demands it, when no reachable
        informative viewpoint remains, or when the estimated time to fly
        home crosses the return-margin fraction of remaining flight time.
        """
        p = self.params
        uav = robot_pose.position
        heading = robot_pose.heading
        home = self.home if return_position is None else np.asarray(return_position)

        if operator_return:
            return GoalDecision(GoalMode.RETURN, reason="operator")
        t_home = self._path_length(smap, uav, home) / max(avg_speed, 1e-6)
        if math.isfinite(t_home) and t_home >= p.return_margin * t_battery:
            return GoalDecision(GoalMode.RETURN, reason="battery")

        usable = [vp for vp in self.cache.values() if not vp.blocked]
        local = [vp for vp in usable
                 if np.all(np.abs(vp.position - uav) <= p.local_box / 2.0)]
        if local:
            scored = [(self.strategy_reward(vp, smap, uav, heading, True), vp.vid, vp)
                      for vp in local]
            scored = [s for s in scored if s[0] > UNREACHABLE]
            scored.sort(key=lambda s: (-s[0], s[1]))
            if scored:
                first = scored[0][2]
                rest = [(self.strategy_reward(vp, smap, first.position,
                                              first.heading, True), vp.vid, vp)
                        for _, _, vp in scored[1:]]
                rest = [s for s in rest if s[0] > UNREACHABLE]
                rest.sort(key=lambda s: (-s[0], s[1]))
                seq = [first] + ([rest[0][2]] if rest else [])
                return GoalDecision(GoalMode.LOCAL, seq, "local viewpoints")
        scored = [(self.strategy_reward(vp, smap, uav, heading, False), vp.vid, vp)
                  for vp in usable]
        scored = [s for s in scored if s[0] > UNREACHABLE]
        scored.sort(key=lambda s: (-s[0], s[1]))
        if scored:
            return GoalDecision(GoalMode.GLOBAL, [scored[0][2]], "global goal")
        return GoalDecision(GoalMode.RETURN, reason="no reachable goals")

    def _path_length(self, smap: SphereMap, a: np.ndarray, b: np.ndarray) -> float:
        try:
            plan = smap.plan(a, b, self.params.risk_avoidance)
        except PlanQueryError:
            return math.inf
        if plan is None:
            return math.inf
        return plan.cost.length

    # -- viewpoint path enhancement -----------------------------------------------

    def vpe_perturb(self, waypoints: np.ndarray, headings: np.ndarray,
                    fmap: FacetMap, densemap: DenseMap,
                    obstacles: ObstacleIndex, v_max: float
                    ) -> tuple[np.ndarray, np.ndarray]:
        """Rotate (and, within the detour budget, shift) samples of a local
        trajectory to cover more uncovered surface on the way."""
        p = self.params
        waypoints = np.atleast_2d(np.asarray(waypoints, dtype=float)).copy()
        headings = np.asarray(headings, dtype=float).copy()
        base_len = float(np.sum(np.linalg.norm(np.diff(waypoints, axis=0), axis=1)))
        budget = p.vpe_detour_budget * base_len  # extra length ~ extra time * v_max
        spent = 0.0
        lateral_options = [0.0] if budget <= 0.0 else [0.0, 0.5, -0.5, 1.0, -1.0]
        for i in range(len(waypoints)):
            best = (0, 0.0, 0.0)   # (gain, heading delta, lateral)
            pose0 = Pose(waypoints[i], rot_z(headings[i]))
            gain0 = fmap.coverage_gain(pose0, self.camera, densemap)
            for dh in (0.0, math.pi / 6, -math.pi / 6, math.pi / 3, -math.pi / 3,
                       math.pi / 2, -math.pi / 2):
                for lat in lateral_options:
                    if lat != 0.0 and spent + 2.0 * abs(lat) > budget:
                        continue
                    side = np.array([-math.sin(headings[i]), math.cos(headings[i]), 0.0])
                    cand = waypoints[i] + side * lat
                    if lat != 0.0:
                        if densemap.state_at(cand) != CellState.FREE:
                            continue
                        if float(obstacles.clearance(cand[None, :])[0]) < p.min_clearance:
                            continue
                    pose = Pose(cand, rot_z(headings[i] + dh))
                    gain = fmap.coverage_gain(pose, self.camera, densemap)
                    extra = gain - gain0
                    if extra > best[0] or (extra == best[0] and abs(dh) + abs(lat)
                                           < abs(best[1]) + abs(best[2])):
                        best = (extra, dh, lat)
            if best[0] > 0:
                headings[i] = headings[i] + best[1]
                if best[2] != 0.0:
                    side = np.array([-math.sin(headings[i]), math.cos(headings[i]), 0.0])
                    waypoints[i] = waypoints[i] + side * best[2]
                    spent += 2.0 * abs(best[2])
        return waypoints, headings
