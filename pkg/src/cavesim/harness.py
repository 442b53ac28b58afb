"""Deterministic mission harness: fixed-timestep loop stepping sensors,
perception, estimation, maps, search, navigation, artifacts, mission
control, and comms for every robot, with metrics and a JSONL event log.
"""

from __future__ import annotations

import json
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import ltvmap as ltv
from .artifacts import (Arbiter, ArtifactFilter, ArtifactHypothesis,
                        NoPositionEstimate, detector_model, estimate_position)
from .comms import (BASE_ID, CmdKind, CommsNetwork, MsgType, OperatorCommand,
                    decode_command, decode_hypothesis, encode_ack,
                    encode_command, encode_hypothesis, encode_position)
from .densemap import DenseMap, DenseMapConfig
from .estimation import (DelayModel, DriftModel, LocalizationSimulator,
                         Repredictor, RepredictorConfig)
from .facetmap import FacetMap, FacetMapConfig
from .geometry import Pose
from .metrics import RobotMetrics, RunMetrics, mapping_error_histogram
from .mission import MissionController, MissionInputs, MissionState
from .navigation import Follower, NavConfig, avoid_collision
from .perception import (FogDetectorConfig, detect_fog, detect_landing,
                         fov_occupancy_limit, landing_config_from,
                         noise_config_from)
from .scenario import Scenario
from .search import GoalMode, SearchParams, SearchPlanner
from .sensors import (DepthCameraModel, LidarModel, RgbCameraModel,
                      depth_frame, lidar_scan, visible_artifacts)
from .spheremap import PlanQueryError, SphereMap, SphereMapConfig
from .world import World


def _rng(seed: int, *streams: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0x7FFFFFFF, *streams])


class Cadence:
    """Fixed-period scheduler aligned to the sim clock."""

    def __init__(self, period: float, offset: float = 0.0):
        self.period = period
        self.next = offset

    def due(self, t: float) -> bool:
        if t + 1e-9 >= self.next:
            self.next += self.period * max(1, math.ceil((t + 1e-9 - self.next)
                                                        / self.period))
            return True
        return False


class RobotRuntime:
    """All per-robot state: sensing, estimation, maps, planning, mission."""

    def __init__(self, index: int, name: str, scn: Scenario, world: World,
                 planner_home: np.ndarray):
        self.index = index
        self.name = name
        self.scn = scn
        self.world = world
        spec = scn.robots[index]
        self.priority = spec.priority
        self.position = np.asarray(spec.position, dtype=float)
        self.heading = float(spec.heading)
        self.velocity = np.zeros(3)

        seed = scn.seed
        self.rng_lidar = _rng(seed, index, 0)
        self.rng_loc = _rng(seed, index, 1)
        self.rng_smap = _rng(seed, index, 2)
        self.rng_search = _rng(seed, index, 3)
        self.rng_detect = _rng(seed, index, 4)
        self.rng_landing = _rng(seed, index, 5)
        self.rng_est = _rng(seed, index, 6)

        sc = scn.sensors
        self.lidar = LidarModel(sc.lidar_rings, sc.lidar_azimuths, sc.lidar_range,
                                sc.lidar_vfov_deg, sc.surface_intensity)
        self.depth_cam = DepthCameraModel(sc.depth_width, sc.depth_height,
                                          sc.depth_fov_deg, sc.depth_range)
        f = (sc.rgb_width / 2.0) / math.tan(math.radians(sc.rgb_fov_deg) / 2.0)
        self.rgb_cam = RgbCameraModel(f, f, sc.rgb_width / 2.0, sc.rgb_height / 2.0,
                                      sc.rgb_width, sc.rgb_height,
                                      max_range=sc.rgb_range)

        p = scn.perception
        self.noise_cfg = noise_config_from(p)
        fog_r = fov_occupancy_limit(self.lidar.ray_directions(), sc.lidar_range,
                                    p.fog_grid_extent, p.fog_grid_voxel)
        self.fog_cfg = FogDetectorConfig(p.fog_ratio, p.fog_grid_extent,
                                         p.fog_grid_voxel, fog_r)
        self.landing_cfg = landing_config_from(p)

        e = scn.estimation
        self.localizer = LocalizationSimulator(
            DriftModel(e.drift_rate, 0.0, e.heading_drift_rate),
            DelayModel(e.delay_mean, e.delay_jitter, e.max_delay), self.rng_loc)
        self.repredictor = Repredictor(
            RepredictorConfig(e.max_delay, e.rate, e.accel_noise, e.meas_noise),
            t0=0.0, initial_position=self.position, initial_heading=self.heading)

        m = scn.mapping
        self.densemap = DenseMap(DenseMapConfig(
            m.resolution, m.hit_logodds, m.miss_logodds, m.clamp_logodds,
            m.occupied_threshold, m.free_threshold, m.max_refine_factor))
        self.spheremap = SphereMap(SphereMapConfig(
            m.sphere_min_radius, m.sphere_safe_radius, m.sphere_samples,
            m.sphere_box, m.segment_max_size))
        self.facetmap = FacetMap(FacetMapConfig(
            m.facet_size, m.facet_max_view_angle_deg, m.facet_box))
        self.obstacles = self.densemap.extract_kdtree()

        s = scn.search
        params = SearchParams(
            c_frontier=s.c_frontier, c_surface=s.c_surface,
            c_surface_flat=s.c_surface_flat, risk_avoidance=s.risk_avoidance,
            return_margin=s.return_margin, info_threshold=s.info_threshold,
            viewpoint_spacing=s.viewpoint_spacing, local_box=s.local_box,
            strategy=s.strategy, vpe=s.vpe, vpe_detour_budget=s.vpe_detour_budget,
            momentum_penalty=s.momentum_penalty, operator_bias=s.operator_bias,
            remote_cost_scale=s.remote_cost_scale, blocked_eps=s.blocked_eps,
            dwell_block_time=s.dwell_block_time, goal_timeout=s.goal_timeout,
            goal_block_radius=s.goal_block_radius,
            info_rays_rings=s.info_rays_rings,
            info_rays_azimuths=s.info_rays_azimuths,
            coverage_block_threshold=s.coverage_block_threshold,
            sample_count=s.sample_count, min_clearance=m.sphere_min_radius)
        self.planner = SearchPlanner(params, self.rgb_cam, planner_home)

        n = scn.navigation
        self.nav_cfg = NavConfig(
            d_safe=n.safety_distance, v_max=n.v_max, a_max=n.a_max, dt=n.dt,
            corridor=n.corridor, carrot_distance=n.carrot_distance,
            replan_period=1.0 / n.replan_rate,
            collision_period=1.0 / n.collision_check_rate,
            plan_lead_time=n.plan_lead_time, progress_timeout=n.progress_timeout,
            avoid_distance=n.avoid_distance, avoid_descend=n.avoid_descend,
            shift_iters=n.shift_iters)
        self.follower = Follower(self.nav_cfg, m.resolution)

        mc = scn.mission
        self.battery_capacity = mc.battery_capacity
        self.battery_used = 0.0
        self.mission = MissionController(mc, self.position.copy())
        self.mission._approved_at = mc.start_delay * index
        self.art_filter = ArtifactFilter(scn.detector, robot=index)
        self._sent_dets: dict[int, int] = {}

        self.latest_cloud_world: np.ndarray | None = None
        self.latest_cloud_stamp = 0.0
        self.in_fog = False
        self.pose_history: list[np.ndarray] = []
        self._backtrack_idx: int | None = None
        self.received_maps: dict[int, ltv.LtvMap] = {}
        self.want_return = False
        self._no_goal_since: float | None = None
        self.current_goal: np.ndarray | None = None
        self.landing_result = None
        self.est_pose = Pose(self.position.copy(), rot_z(self.heading))

        # cadences
        tick = scn.tick
        self.cad_lidar = Cadence(1.0 / sc.lidar_rate, offset=0.0)
        self.cad_maps = Cadence(1.0 / m.map_update_rate, offset=0.1)
        self.cad_detect = Cadence(1.0 / sc.detector_rate, offset=0.05)
        self.cad_landing = Cadence(0.5, offset=0.2)
        self.cad_goal = Cadence(1.0, offset=0.3)
        self.cad_history = Cadence(0.2, offset=0.0)
        self.cad_ltv = Cadence(scn.comms.ltv_period, offset=0.5 + 0.1 * index)
        self.cad_beacon = Cadence(scn.comms.beacon_period, offset=0.15)
        self.cad_hyp = Cadence(1.0, offset=0.4)
        _ = tick

    # -- small helpers ------------------------------------------------------

    @property
    def battery_remaining(self) -> float:
        return max(0.0, self.battery_capacity - self.battery_used)

    def node_id(self) -> str:
        return self.name

    def true_pose(self, t: float) -> Pose:
        return Pose(self.position.copy(), rot_z(self.heading), t)

    def frontier_list(self) -> list[tuple[np.ndarray, float, float]]:
        out = []
        for vid in sorted(self.planner.cache):
            vp = self.planner.cache[vid]
            if vp.kind == "frontier" and not vp.blocked:
                out.append((vp.position, vp.heading, vp.info))
        return out


class SimRunner:
    """Owns the world, the fleet, the network, and the base station."""

    def __init__(self, scn: Scenario, seed: int | None = None,
                 scripted_commands: list[tuple[float, OperatorCommand]] | None = None):
        if seed is not None:
            scn.seed = seed
        self.scn = scn
        self.world = World(scn)
        self.robots = [RobotRuntime(i, r.name, scn, self.world,
                                    np.asarray(scn.home, dtype=float))
                       for i, r in enumerate(scn.robots)]
        self.net = CommsNetwork(scn.comms, _rng(scn.seed, 999))
        for r in self.robots:
            self.net.set_position(r.node_id(), r.position)
        course = self.world.bounds
        self.arbiter = Arbiter(scn.arbiter, course=course)
        self.base_hypotheses: dict[tuple[int, int], ArtifactHypothesis] = {}
        self.active_fog: set[int] = set()
        self.events: list[dict] = []
        self.metrics = RunMetrics()
        for r in self.robots:
            self.metrics.robots[r.name] = RobotMetrics(r.name)
        self.metrics.artifacts_total = len(self.world.artifacts)
        self._art_seen: set[int] = set()
        self._art_detected: set[int] = set()
        self._art_confirmed: set[int] = set()
        self.t = 0.0
        self.cad_arbiter = Cadence(1.0, offset=0.6)
        self.cad_coverage = Cadence(2.0, offset=1.0)
        self._scripted = sorted(scripted_commands or [], key=lambda x: x[0])
        self._injected: list[OperatorCommand] = []
        self.snapshot_hook = None           # telemetry callback
        self._pending_commands: list[OperatorCommand] = []
        self._cmd_log: list[tuple[float, OperatorCommand]] = []

    # -- events ---------------------------------------------------------------

    def emit(self, kind: str, robot: str | None = None, **fields) -> None:
        e = {"t": round(self.t, 6), "type": kind}
        if robot is not None:
            e["robot"] = robot
        e.update({k: v for k, v in sorted(fields.items())})
        self.events.append(e)

    def inject_command(self, cmd: OperatorCommand) -> None:
        """Thread-safe enough for the telemetry queue: picked up next tick."""
        self._pending_commands.append(cmd)

    # -- main loop ---------------------------------------------------------------

    def run(self, duration: float | None = None,
            wall_budget: float | None = None) -> RunMetrics:
        scn = self.scn
        duration = scn.duration if duration is None else duration
        tick = scn.tick
        n_steps = int(round(duration / tick))
        started = _time.monotonic()
        for step in range(n_steps):
            self.t = round((step + 1) * tick, 9)
            self.step_once(tick)
            if wall_budget is not None and _time.monotonic() - started > wall_budget:
                self.emit("wall_budget_exceeded")
                break
        self.finalize()
        return self.metrics

    def step_once(self, dt: float) -> None:
        t = self.t
        # scripted + injected operator commands enter through the base station
        while self._scripted and self._scripted[0][0] <= t:
            _, cmd = self._scripted.pop(0)
            self._send_command(cmd)
        for cmd in self._pending_commands:
            self._send_command(cmd)
            self._cmd_log.append((t, cmd))
        self._pending_commands.clear()

        self._update_fog()
        for robot in self.robots:
            self._step_robot(robot, dt)
            self.net.set_position(robot.node_id(), robot.position)
        self._deliver_messages()
        if self.cad_arbiter.due(t):
            report = self.arbiter.step(sorted(self.base_hypotheses.values(),
                                              key=lambda h: (h.robot, h.hid)),
                                       t, self.world)
            if report is not None:
                self.emit("report", cls=report.cls, robot_id=report.robot,
                          scored=report.scored,
                          position=[round(float(v), 3) for v in report.position])
        if self.cad_coverage.due(t):
            total = sum(len(r.facetmap) for r in self.robots)
            covered = sum(r.facetmap.covered_count() for r in self.robots)
            self.metrics.coverage_timeline.append(
                (t, covered / total if total else 0.0))
        if self.snapshot_hook is not None:
            self.snapshot_hook(self)

    # -- per robot -------------------------------------------------------------

    def _step_robot(self, robot: RobotRuntime, dt: float) -> None:
        t = self.t
        mc = robot.mission
        state = mc.state

        if state == MissionState.FINISHED:
            self.metrics.robots[robot.name].final_state = state.value
            return

        prev_pos = robot.position.copy()

        # -- sensing + estimation at lidar cadence
        if robot.cad_lidar.due(t):
            self._sense(robot, t)

        robot.est_pose = robot.repredictor.estimate(t).pose()

        # -- map maintenance
        if robot.cad_maps.due(t) and state not in (MissionState.COMPONENT_CHECK,
                                                   MissionState.WAITING_FOR_TAKEOFF):
            robot.obstacles = robot.densemap.extract_kdtree()
            robot.spheremap.update(robot.densemap, robot.est_pose.position,
                                   robot.rng_smap)
            robot.facetmap.update(robot.densemap, robot.est_pose)
            robot.facetmap.mark_coverage(robot.est_pose, robot.rgb_cam,
                                         robot.densemap)
            if mc.state == MissionState.EXPLORATION:
                robot.planner.cache_update(robot.est_pose, robot.densemap,
                                           robot.facetmap, robot.obstacles,
                                           robot.rng_search)
            robot.planner.visited.update(robot.est_pose.position,
                                         1.0 / self.scn.mapping.map_update_rate)

        # -- landing spots
        if robot.cad_landing.due(t) and mc.airborne:
            dframe = depth_frame(robot.true_pose(t), robot.depth_cam, self.world)
            cam_pose = robot.est_pose.compose(Pose(robot.depth_cam.mount_translation,
                                                   robot.depth_cam.mount_rotation))
            robot.landing_result = detect_landing(dframe, cam_pose,
                                                  robot.landing_cfg,
                                                  robot.rng_landing)
            if mc.landmap.add(robot.landing_result):
                self.emit("landing_spot", robot.name,
                          position=[round(float(v), 2)
                                    for v in robot.landing_result.position])

        # -- artifact detection
        if robot.cad_detect.due(t) and mc.airborne:
            self._detect_artifacts(robot, t)

        # -- collision avoidance against peers
        peers = [(r.position, r.velocity, r.priority)
                 for r in self.robots if r is not robot and r.mission.airborne]
        override = avoid_collision(robot.position, robot.velocity, robot.priority,
                                   peers, robot.nav_cfg.avoid_distance,
                                   robot.nav_cfg.avoid_descend)

        # -- mission step
        inputs = MissionInputs(
            t=t, dt=dt, position=robot.position.copy(),
            battery_s=robot.battery_remaining,
            lidar_in_fog=robot.in_fog,
            collision_override=override is not None,
            at_target=self._at_target(robot),
            nav_unreachable=robot.follower.unreachable,
            landing_check=robot.landing_result,
            comms_connected=self.net.connected(robot.node_id()),
            want_return=robot.want_return)
        actions = mc.step(inputs)
        for ev in actions.events:
            self.emit("mission", robot.name, detail=ev, state=mc.state.value)
            if ev == "gate region closed":
                robot.planner.block_region(np.asarray(self.scn.home, dtype=float),
                                           2.0, "gate closed")
        if actions.block_fog_region is not None:
            radius = max((e.radius for e in self.world.fog_emitters), default=3.0)
            robot.planner.block_region(actions.block_fog_region, radius + 1.0,
                                       "fog")

        # -- motion
        self._move(robot, actions, override, t, dt)

        # -- search layer
        if actions.explore and robot.cad_goal.due(t):
            self._explore_decision(robot, t)

        # -- pose history for backtracking
        if (robot.cad_history.due(t) and not robot.in_fog and mc.airborne
                and mc.state != MissionState.BACKTRACKING):
            robot.pose_history.append(robot.position.copy())
            robot._backtrack_idx = None

        # -- comms
        node = robot.node_id()
        if robot.cad_beacon.due(t):
            payload = encode_position(robot.index, robot.position,
                                      mc.state.value, robot.battery_remaining)
            self.net.send(t, node, None, MsgType.POSITION, payload)
        if self.scn.share_maps and robot.cad_ltv.due(t) and mc.airborne:
            m = ltv.extract(robot.spheremap, robot.facetmap,
                            robot.frontier_list(), robot=robot.index, stamp=t)
            payload = ltv.serialize(m)
            self.metrics.robots[robot.name].ltv_bytes_sent += len(payload)
            self.net.send(t, node, None, MsgType.LTVMAP, payload)
        if robot.cad_hyp.due(t):
            for hid in sorted(robot.art_filter.hypotheses):
                hyp = robot.art_filter.hypotheses[hid]
                if not hyp.confirmed:
                    continue
                if robot._sent_dets.get(hid) == hyp.n_detections:
                    continue
                robot._sent_dets[hid] = hyp.n_detections
                self.net.send(t, node, BASE_ID, MsgType.HYPOTHESIS,
                              encode_hypothesis(hyp))

        # -- battery and odometry accounting
        if mc.airborne:
            robot.battery_used += dt
            met = self.metrics.robots[robot.name]
            met.active_time += dt
            met.traveled += float(np.linalg.norm(robot.position - prev_pos))
        self.metrics.robots[robot.name].final_state = mc.state.value

    # -- sensing -----------------------------------------------------------------

    def _sense(self, robot: RobotRuntime, t: float) -> None:
        pose = robot.true_pose(t)
        cloud = lidar_scan(pose, robot.lidar, self.world, robot.rng_lidar,
                           tuple(sorted(self.active_fog)))
        filtered = filter_noise(cloud, robot.noise_cfg)
        in_fog, _ratio = detect_fog(filtered, robot.fog_cfg)
        was = robot.in_fog
        robot.in_fog = in_fog
        if in_fog and not was:
            self.emit("fog_detected", robot.name)
        # localization measurement + state estimate
        meas = robot.localizer.step(pose, t)
        try:
            robot.repredictor.insert(meas)
        except Exception:
            pass
        est = robot.repredictor.estimate(t).pose()
        if not in_fog:
            robot.densemap.insert_scan(filtered, Pose(est.position, pose.rotation, t))
            pts_world = Pose(est.position, pose.rotation, t).transform(filtered.points)
            robot.latest_cloud_world = pts_world
            robot.latest_cloud_stamp = t

    def _detect_artifacts(self, robot: RobotRuntime, t: float) -> None:
        visible = visible_artifacts(robot.true_pose(t), robot.rgb_cam, self.world)
        for (uid, _box, _occ) in visible:
            self._art_seen.add(uid)
        if not visible:
            return
        dets = detector_model(visible, self.world, self.scn.detector,
                              robot.rng_detect, robot.rgb_cam, camera_id=0,
                              stamp=t, robot=robot.index)
        if not dets:
            return
        for d in dets:
            if d.source_uid >= 0:
                self._art_detected.add(d.source_uid)
        cam_pose = robot.est_pose.compose(Pose(robot.rgb_cam.mount_translation,
                                               robot.rgb_cam.mount_rotation))
        pairs = []
        for det in dets:
            cloud_cam = None
            if robot.latest_cloud_world is not None:
                from .sensors import PointCloud
                pts_cam = cam_pose.inverse_transform(robot.latest_cloud_world)
                cloud_cam = PointCloud(pts_cam, np.zeros(len(pts_cam)),
                                       robot.latest_cloud_stamp, "cam")
            try:
                est = estimate_position(det, cloud_cam, robot.densemap,
                                        robot.rgb_cam, cam_pose,
                                        self.scn.detector, robot.rng_detect)
            except NoPositionEstimate:
                continue
            pairs.append((det, est))
        if pairs:
            robot.art_filter.step(pairs)
            for hyp in robot.art_filter.confirmed():
                for art in self.world.artifacts:
                    if (np.linalg.norm(np.asarray(art.position) - hyp.position)
                            <= self.scn.arbiter.scoring_radius):
                        self._art_confirmed.add(art.uid)

    # -- motion ------------------------------------------------------------------

    def _at_target(self, robot: RobotRuntime) -> bool:
        if robot.follower.route is None:
            return True
        return (np.linalg.norm(robot.position - robot.follower.route[-1]) < 0.6)

    def _move(self, robot: RobotRuntime, actions, override, t: float,
              dt: float) -> None:
        mc = robot.mission
        state = mc.state
        if override is not None and state == MissionState.AVOIDING_COLLISIONS:
            robot.velocity = np.array([0.0, 0.0, -0.5])
            robot.position = robot.position + robot.velocity * dt
            floor_z = 0.2
            robot.position[2] = max(robot.position[2], floor_z)
            return
        if state == MissionState.PERFORMING_TAKEOFF:
            target_z = mc.home[2] + mc.cfg.takeoff_height
            dz = min(1.0 * dt, max(0.0, target_z - robot.position[2]))
            robot.position[2] += dz
            robot.velocity = np.array([0.0, 0.0, dz / dt if dt > 0 else 0.0])
            return
        if state == MissionState.LANDING or actions.land_now:
            robot.velocity = np.array([0.0, 0.0, -0.5])
            robot.position = robot.position + robot.velocity * dt
            robot.position[2] = max(robot.position[2], 0.05)
            return
        if state == MissionState.BACKTRACKING or actions.backtrack:
            self._backtrack_move(robot, dt)
            return
        if actions.halt:
            robot.follower.clear()
            robot.velocity = np.zeros(3)
            return
        if actions.target is not None:
            self._ensure_route(robot, np.asarray(actions.target, dtype=float), t)
        status = robot.follower.tick(t, robot.position, robot.velocity,
                                     robot.obstacles)
        if status.unreachable and robot.current_goal is not None:
            robot.planner.block_region(robot.current_goal,
                                       robot.planner.params.goal_block_radius,
                                       "timeout")
            self.emit("goal_blocked", robot.name,
                      position=[round(float(v), 2) for v in robot.current_goal])
            robot.follower.clear()
            robot.current_goal = None
            return
        traj = robot.follower.trajectory
        if traj is not None:
            pos, vel, heading = traj.sample(t)
            robot.position = pos
            robot.velocity = vel
            robot.heading = heading
        else:
            robot.velocity = np.zeros(3)

    def _backtrack_move(self, robot: RobotRuntime, dt: float) -> None:
        hist = robot.pose_history
        if not hist:
            return
        if robot._backtrack_idx is None:
            robot._backtrack_idx = len(hist) - 1
        idx = robot._backtrack_idx
        target = hist[idx]
        d = target - robot.position
        dist = float(np.linalg.norm(d))
        step = 1.0 * dt
        if dist <= step:
            robot.position = target.copy()
            robot._backtrack_idx = max(0, idx - 1)
        else:
            robot.position = robot.position + d / dist * step
        robot.velocity = (d / dist if dist > 1e-9 else np.zeros(3)) * 1.0

    def _ensure_route(self, robot: RobotRuntime, target: np.ndarray,
                      t: float) -> None:
        if (robot.follower.route is not None
                and np.linalg.norm(robot.follower.route[-1] - target) < 0.3):
            return
        try:
            plan = robot.spheremap.plan(robot.est_pose.position, target,
                                        robot.planner.params.risk_avoidance)
        except PlanQueryError:
            plan = None
        if plan is not None and len(plan.points) >= 2:
            robot.follower.set_route(plan.points, t)
        else:
            robot.follower.set_route(np.vstack([robot.position, target]), t)

    # -- search decisions -----------------------------------------------------------

    def _explore_decision(self, robot: RobotRuntime, t: float) -> None:
        mc = robot.mission
        robot.planner.explore_bias = mc.explore_bias
        decision = robot.planner.select_goal(
            robot.est_pose, robot.spheremap, robot.battery_remaining,
            operator_return=False,
            return_position=mc.return_position,
            avg_speed=max(0.5, self.scn.navigation.v_max / 2.0))
        if decision.mode == GoalMode.RETURN:
            if decision.reason == "battery":
                robot.want_return = True
                self.emit("return_triggered", robot.name, reason=decision.reason)
            else:
                if robot._no_goal_since is None:
                    robot._no_goal_since = t
                elif t - robot._no_goal_since > 6.0:
                    robot.want_return = True
                    self.emit("return_triggered", robot.name,
                              reason=decision.reason)
            return
        robot._no_goal_since = None
        if not decision.viewpoints:
            return
        goal_vp = decision.viewpoints[0]
        new_goal = goal_vp.position
        if (robot.current_goal is not None
                and np.linalg.norm(new_goal - robot.current_goal) < 0.5
                and robot.follower.route is not None):
            return
        robot.current_goal = new_goal.copy()
        try:
            plan = robot.spheremap.plan(robot.est_pose.position, new_goal,
                                        robot.planner.params.risk_avoidance)
        except PlanQueryError:
            plan = None
        points = plan.points if plan is not None else np.vstack(
            [robot.position, new_goal])
        if len(decision.viewpoints) > 1 and decision.mode == GoalMode.LOCAL:
            nxt = decision.viewpoints[1]
            try:
                plan2 = robot.spheremap.plan(new_goal, nxt.position,
                                             robot.planner.params.risk_avoidance)
            except PlanQueryError:
                plan2 = None
            if plan2 is not None and len(plan2.points) >= 2:
                points = np.vstack([points, plan2.points[1:]])
        if self.scn.search.vpe and decision.mode == GoalMode.GLOBAL:
            headings = np.full(len(points), goal_vp.heading)
            points, _ = robot.planner.vpe_perturb(points, headings,
                                                  robot.facetmap, robot.densemap,
                                                  robot.obstacles,
                                                  self.scn.navigation.v_max)
        robot.follower.set_route(points, t, goal_heading=goal_vp.heading)
        robot.planner.progress.start(new_goal, t)
        self.emit("goal", robot.name, mode=decision.mode.value,
                  position=[round(float(v), 2) for v in new_goal],
                  info=round(goal_vp.info, 2), kind=goal_vp.kind)

    # -- fog and comms -----------------------------------------------------------------

    def _update_fog(self) -> None:
        for emitter in self.world.fog_emitters:
            if emitter.uid in self.active_fog:
                continue
            for robot in self.robots:
                d = float(np.linalg.norm(robot.position - np.asarray(emitter.center)))
                if d <= emitter.trigger:
                    self.active_fog.add(emitter.uid)
                    self.emit("fog_triggered", robot.name, emitter=emitter.uid)
                    break

    def _send_command(self, cmd: OperatorCommand) -> None:
        robot = self.robots[cmd.target_robot] if cmd.target_robot < len(self.robots) \
            else None
        if robot is None:
            return
        payload = encode_command(cmd)
        reached = self.net.send(self.t, BASE_ID, robot.node_id(),
                                MsgType.OPERATOR_CMD, payload)
        self.emit("command_sent", robot.name, cid=cmd.cid, kind=cmd.kind.name,
                  delivered=bool(reached))
        if not reached:
            self.emit("command_lost", robot.name, cid=cmd.cid)

    def _deliver_messages(self) -> None:
        name_to_robot = {r.node_id(): r for r in self.robots}
        for d in self.net.poll(self.t):
            if d.msg_type == MsgType.HYPOTHESIS and d.dst == BASE_ID:
                msg = decode_hypothesis(d.payload)
                probs = {c: p for c, p in msg.top_classes}
                self.base_hypotheses[(msg.robot, msg.hid)] = ArtifactHypothesis(
                    hid=msg.hid * 256 + msg.robot, position=msg.position,
                    covariance=msg.covariance, class_probs=probs,
                    n_detections=msg.n_detections, robot=msg.robot,
                    stamp=msg.stamp,
                    confidence_sum=msg.mean_confidence * msg.n_detections)
            elif d.msg_type == MsgType.LTVMAP and d.dst in name_to_robot:
                robot = name_to_robot[d.dst]
                try:
                    m = ltv.deserialize(d.payload)
                except ltv.LtvDecodeError:
                    continue
                if m.robot == robot.index:
                    continue
                robot.received_maps[m.robot] = m
                own = ltv.extract(robot.spheremap, robot.facetmap,
                                  robot.frontier_list(), robot=robot.index,
                                  stamp=self.t)
                ordered = [own] + [robot.received_maps[k]
                                   for k in sorted(robot.received_maps)]
                updated = ltv.co_update(ordered)
                robot.received_maps = {m2.robot: m2 for m2 in updated[1:]}
                robot.planner.update_received(robot.received_maps)
            elif d.msg_type == MsgType.OPERATOR_CMD and d.dst in name_to_robot:
                robot = name_to_robot[d.dst]
                cmd = decode_command(d.payload)
                ok, reason = robot.mission.handle_command(cmd, self.t)
                if cmd.kind == CmdKind.RESUME and ok:
                    robot.planner.reset_blocks()
                    robot.want_return = False
                self.emit("command_handled", robot.name, cid=cmd.cid,
                          kind=cmd.kind.name, accepted=ok, reason=reason)
                self.net.send(self.t, robot.node_id(), BASE_ID, MsgType.CMD_ACK,
                              encode_ack(cmd.cid, robot.index, ok, reason))

    # -- wrap-up ---------------------------------------------------------------------

    def finalize(self) -> None:
        m = self.metrics
        m.duration = self.t
        m.messages_sent = self.net.sent_messages
        m.messages_dropped = self.net.dropped
        m.bytes_sent = self.net.sent_bytes
        m.artifacts_seen = len(self._art_seen)
        m.artifacts_detected = len(self._art_detected)
        m.artifacts_confirmed = len(self._art_confirmed)
        reported_arts: set[int] = set()
        scored_arts: set[int] = set()
        for rep in self.arbiter.ledger.reports:
            m.reports.append({
                "t": round(rep.time, 3), "class": rep.cls, "robot": rep.robot,
                "scored": rep.scored,
                "position": [round(float(v), 3) for v in rep.position]})
            for art in self.world.artifacts:
                if (np.linalg.norm(np.asarray(art.position) - rep.position)
                        <= self.scn.arbiter.scoring_radius):
                    reported_arts.add(art.uid)
                    if art.cls == rep.cls:
                        scored_arts.add(art.uid)
        m.artifacts_reported = len(reported_arts)
        m.artifacts_scored = len(scored_arts)
        all_map_pts = [r.densemap.occupied_centers() for r in self.robots]
        all_map_pts = [p for p in all_map_pts if len(p)]
        truth = self.world.occupied_centers()
        if all_map_pts:
            counts, edges = mapping_error_histogram(np.vstack(all_map_pts), truth)
            m.mapping_error_hist = counts
            m.mapping_error_edges = edges

    def event_log_json(self) -> str:
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.events) + "\n"

    def command_log(self) -> list[tuple[float, OperatorCommand]]:
        return list(self._cmd_log)
