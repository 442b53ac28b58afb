"""Mission control: the per-robot high-level state machine, operator
command handling, and the LandMap of verified safe landing spots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .comms import CmdKind, OperatorCommand
from .perception import Landability, LandingResult
from .scenario import MissionConfig


class MissionState(Enum):
    COMPONENT_CHECK = "COMPONENT_CHECK"
    WAITING_FOR_TAKEOFF = "WAITING_FOR_TAKEOFF"
    READY_FOR_TAKEOFF = "READY_FOR_TAKEOFF"
    PERFORMING_TAKEOFF = "PERFORMING_TAKEOFF"
    FLYING_THROUGH_GATE = "FLYING_THROUGH_GATE"
    EXPLORATION = "EXPLORATION"
    FLYING_BACK_TO_START = "FLYING_BACK_TO_START"
    FLYING_TO_LANDING_SPOT = "FLYING_TO_LANDING_SPOT"
    LANDING = "LANDING"
    FINISHED = "FINISHED"
    BACKTRACKING = "BACKTRACKING"
    AVOIDING_COLLISIONS = "AVOIDING_COLLISIONS"


# legal transition edges; anything else is a programming error
_EDGES: dict[MissionState, set[MissionState]] = {
    MissionState.COMPONENT_CHECK: {MissionState.WAITING_FOR_TAKEOFF},
    MissionState.WAITING_FOR_TAKEOFF: {MissionState.READY_FOR_TAKEOFF},
    MissionState.READY_FOR_TAKEOFF: {MissionState.PERFORMING_TAKEOFF,
                                     MissionState.WAITING_FOR_TAKEOFF},
    MissionState.PERFORMING_TAKEOFF: {MissionState.FLYING_THROUGH_GATE},
    MissionState.FLYING_THROUGH_GATE: {MissionState.EXPLORATION},
    MissionState.EXPLORATION: {MissionState.FLYING_BACK_TO_START,
                               MissionState.FLYING_TO_LANDING_SPOT,
                               MissionState.BACKTRACKING,
                               MissionState.AVOIDING_COLLISIONS,
                               MissionState.LANDING},
    MissionState.BACKTRACKING: {MissionState.EXPLORATION},
    MissionState.AVOIDING_COLLISIONS: {MissionState.EXPLORATION},
    MissionState.FLYING_BACK_TO_START: {MissionState.FLYING_TO_LANDING_SPOT,
                                        MissionState.LANDING,
                                        MissionState.AVOIDING_COLLISIONS},
    MissionState.FLYING_TO_LANDING_SPOT: {MissionState.LANDING,
                                          MissionState.AVOIDING_COLLISIONS},
    MissionState.LANDING: {MissionState.FINISHED},
    MissionState.FINISHED: set(),
}


class LandMap:
    """Sparse, resolution-deduplicated set of verified safe landing spots."""

    def __init__(self, resolution: float = 5.0):
        self.resolution = resolution
        self.spots: dict[tuple[int, int], np.ndarray] = {}
        self.invalidated: set[tuple[int, int]] = set()

    def _key(self, p: np.ndarray) -> tuple[int, int]:
        return (int(math.floor(p[0] / self.resolution)),
                int(math.floor(p[1] / self.resolution)))

    def add(self, result: LandingResult) -> bool:
        if result.classification != Landability.SAFE or result.position is None:
            return False
        key = self._key(result.position)
        if key in self.invalidated or key in self.spots:
            return False
        self.spots[key] = np.asarray(result.position, dtype=float)
        return True

    def invalidate(self, p: np.ndarray) -> None:
        key = self._key(np.asarray(p))
        self.spots.pop(key, None)
        self.invalidated.add(key)

    def nearest(self, p: np.ndarray) -> np.ndarray | None:
        if not self.spots:
            return None
        keys = sorted(self.spots.keys())
        pts = np.array([self.spots[k] for k in keys])
        i = int(np.argmin(np.linalg.norm(pts - np.asarray(p), axis=1)))
        return pts[i].copy()

    def __len__(self) -> int:
        return len(self.spots)


@dataclass
class MissionInputs:
    t: float
    dt: float
    position: np.ndarray
    battery_s: float
    lidar_in_fog: bool = False
    collision_override: bool = False
    at_target: bool = False
    nav_unreachable: bool = False
    landing_check: LandingResult | None = None
    comms_connected: bool = False
    want_return: bool = False              # search layer decided to return


@dataclass
class MissionActions:
    target: np.ndarray | None = None       # navigate here (long-distance)
    backtrack: bool = False                # follow pose history, ignore map
    halt: bool = False
    descend: float = 0.0
    block_fog_region: np.ndarray | None = None
    explore: bool = False                  # run the search layer this tick
    land_now: bool = False
    power_down: bool = False
    events: list[str] = field(default_factory=list)


class InvalidTransition(AssertionError):
    pass


class MissionController:
    """High-level per-robot mission logic over the defined state set."""

    def __init__(self, cfg: MissionConfig, home: np.ndarray, start_time: float = 0.0):
        self.cfg = cfg
        self.home = np.asarray(home, dtype=float)
        self.state = MissionState.COMPONENT_CHECK
        self.return_position = self.home.copy()
        self.landmap = LandMap(cfg.landmap_resolution)
        self.gate_closed = False
        self._ready_since: float | None = None
        self._approved_at = start_time + cfg.start_delay
        self._fog_clear_ticks = 0
        self._fog_entry: np.ndarray | None = None
        self._landing_target: np.ndarray | None = None
        # operator overrides
        self.stopped = False
        self.land_requested = False
        self.forced_return = False
        self.explore_bias: np.ndarray | None = None
        self.plan_target: np.ndarray | None = None
        self._seen_commands: set[int] = set()
        self.state_trace: list[tuple[float, str]] = [(start_time, self.state.value)]

    # -- transitions -------------------------------------------------------

    def _go(self, new: MissionState, t: float) -> None:
        if new == self.state:
            return
        if new not in _EDGES[self.state]:
            raise InvalidTransition(f"{self.state.value} -> {new.value}")
        self.state = new
        self.state_trace.append((t, new.value))

    # -- operator commands ----------------------------------------------------

    _COMMAND_STATES = {MissionState.EXPLORATION}

    def handle_command(self, cmd: OperatorCommand, t: float) -> tuple[bool, str]:
        """Apply an operator command; duplicates (same id) are no-ops.

        Commands are accepted only while the robot performs its primary
        goal; a Land without a prior Stop is rejected.
        """
        if cmd.cid in self._seen_commands:
            return True, "duplicate"
        if self.state not in self._COMMAND_STATES:
            return False, f"rejected in state {self.state.value}"
        if cmd.kind == CmdKind.LAND and not self.stopped:
            return False, "Land requires a prior Stop"
        self._seen_commands.add(cmd.cid)
        if cmd.kind == CmdKind.EXPLORE_TO:
            self.explore_bias = np.asarray(cmd.position, dtype=float)
        elif cmd.kind == CmdKind.PLAN_TO:
            self.plan_target = np.asarray(cmd.position, dtype=float)
            self.stopped = False
        elif cmd.kind == CmdKind.SET_RETURN:
            self.return_position = np.asarray(cmd.position, dtype=float)
        elif cmd.kind == CmdKind.STOP:
            self.stopped = True
            self.plan_target = None
        elif cmd.kind == CmdKind.LAND:
            self.land_requested = True
        elif cmd.kind == CmdKind.RETURN_HOME:
            self.forced_return = True
        elif cmd.kind == CmdKind.RESUME:
            # cancels forced behavior except Land and Set-return-position
            self.stopped = False
            self.forced_return = False
            self.explore_bias = None
            self.plan_target = None
        return True, "ok"

    # -- main step ---------------------------------------------------------------

    def step(self, inp: MissionInputs) -> MissionActions:
        act = MissionActions()
        s = self.state

        if s == MissionState.COMPONENT_CHECK:
            # all simulated components are healthy by construction
            self._go(MissionState.WAITING_FOR_TAKEOFF, inp.t)
        elif s == MissionState.WAITING_FOR_TAKEOFF:
            if inp.t >= self._approved_at:
                self._go(MissionState.READY_FOR_TAKEOFF, inp.t)
                self._ready_since = inp.t
        elif s == MissionState.READY_FOR_TAKEOFF:
            if inp.t - (self._ready_since or inp.t) >= self.cfg.ready_timeout:
                self._go(MissionState.PERFORMING_TAKEOFF, inp.t)
        elif s == MissionState.PERFORMING_TAKEOFF:
            target = self.home + np.array([0.0, 0.0, self.cfg.takeoff_height])
            act.target = target
            if abs(inp.position[2] - target[2]) < 0.15:
                self._go(MissionState.FLYING_THROUGH_GATE, inp.t)
        elif s == MissionState.FLYING_THROUGH_GATE:
            gate = self.cfg.gate_position
            if gate is None:
                self._close_gate(act, inp)
                self._go(MissionState.EXPLORATION, inp.t)
            else:
                act.target = np.asarray(gate, dtype=float)
                if np.linalg.norm(inp.position - act.target) < 0.5 or inp.at_target:
                    self._close_gate(act, inp)
                    self._go(MissionState.EXPLORATION, inp.t)
        elif s == MissionState.EXPLORATION:
            if inp.lidar_in_fog:
                self._fog_entry = inp.position.copy()
                self._fog_clear_ticks = 0
                self._go(MissionState.BACKTRACKING, inp.t)
                act.backtrack = True
                act.events.append("fog detected, backtracking")
            elif inp.collision_override:
                self._go(MissionState.AVOIDING_COLLISIONS, inp.t)
                act.halt = True
            elif self.land_requested:
                spot = self.landmap.nearest(inp.position)
                self._landing_target = spot if spot is not None else inp.position.copy()
                if spot is not None:
                    act.target = self._landing_target
                    self._go(MissionState.FLYING_TO_LANDING_SPOT, inp.t)
                else:
                    self._go(MissionState.LANDING, inp.t)
                    act.land_now = True
            elif self.forced_return or inp.want_return:
                self._go(MissionState.FLYING_BACK_TO_START, inp.t)
                act.target = self.return_position
                act.events.append("returning")
            elif self.stopped:
                act.halt = True
            elif self.plan_target is not None:
                act.target = self.plan_target
                if np.linalg.norm(inp.position - self.plan_target) < 0.5:
                    self.plan_target = None
                    act.halt = True
                    act.target = None
            else:
                act.explore = True
        elif s == MissionState.BACKTRACKING:
            act.backtrack = True
            if not inp.lidar_in_fog:
                self._fog_clear_ticks += 1
            else:
                self._fog_clear_ticks = 0
            if self._fog_clear_ticks >= 10:
                act.block_fog_region = self._fog_entry
                act.events.append("fog region blocked")
                self._go(MissionState.EXPLORATION, inp.t)
        elif s == MissionState.AVOIDING_COLLISIONS:
            act.halt = True
            act.descend = 0.0 if not inp.collision_override else 1.0
            if not inp.collision_override:
                self._go(MissionState.EXPLORATION, inp.t)
        elif s == MissionState.FLYING_BACK_TO_START:
            act.target = self.return_position
            out_of_time = inp.battery_s <= 0.0
            near = np.linalg.norm(inp.position - self.return_position) < 1.0
            if out_of_time:
                self._go(MissionState.LANDING, inp.t)
                act.land_now = True
            elif near or (inp.comms_connected and inp.at_target):
                spot = self.landmap.nearest(inp.position)
                if spot is None:
                    self._go(MissionState.LANDING, inp.t)
                    act.land_now = True
                else:
                    self._landing_target = spot
                    act.target = spot
                    self._go(MissionState.FLYING_TO_LANDING_SPOT, inp.t)
        elif s == MissionState.FLYING_TO_LANDING_SPOT:
            act.target = self._landing_target
            if inp.battery_s <= 0.0:
                self._go(MissionState.LANDING, inp.t)
                act.land_now = True
            elif (self._landing_target is not None
                    and np.linalg.norm(inp.position[:2] - self._landing_target[:2])
                    < 0.6):
                # verify the stored spot once more before committing
                check = inp.landing_check
                if check is not None and check.classification != Landability.SAFE:
                    self.landmap.invalidate(self._landing_target)
                    act.events.append("landing spot invalidated on re-check")
                    nxt = self.landmap.nearest(inp.position)
                    if nxt is None:
                        self._go(MissionState.LANDING, inp.t)
                        act.land_now = True
                    else:
                        self._landing_target = nxt
                        act.target = nxt
                else:
                    self._go(MissionState.LANDING, inp.t)
                    act.land_now = True
        elif s == MissionState.LANDING:
            act.land_now = True
            if inp.position[2] <= self.cfg.blind_landing_height:
                self._go(MissionState.FINISHED, inp.t)
                act.power_down = True
        elif s == MissionState.FINISHED:
            act.power_down = True
        return act

    def _close_gate(self, act: MissionActions, inp: MissionInputs) -> None:
        if not self.gate_closed:
            self.gate_closed = True
            act.events.append("gate region closed")

    @property
    def airborne(self) -> bool:
        return self.state in {
            MissionState.FLYING_THROUGH_GATE, MissionState.EXPLORATION,
            MissionState.FLYING_BACK_TO_START, MissionState.FLYING_TO_LANDING_SPOT,
            MissionState.LANDING, MissionState.BACKTRACKING,
            MissionState.AVOIDING_COLLISIONS, MissionState.PERFORMING_TAKEOFF,
        }
