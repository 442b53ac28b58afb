"""Scenario files: a human-editable sectioned text format.

Grammar (documented in full in docs/scenario.md):

    file     := header line*
    header   := "# cavesim scenario v1"
    line     := section | entry | comment | blank
    section  := "[" name "]"
    entry    := key "=" value ("#" comment)?
    value    := whitespace-separated tokens (numbers or words)

Repeatable keys (``box``, ``artifact``, ``robot``, ...) accumulate in file
order. Parsing is strict: unknown sections or malformed entries raise
:class:`ScenarioError` with the offending line number. ``write()`` emits a
file that parses back to an equal :class:`Scenario`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

HEADER = "# cavesim scenario v1"

ARTIFACT_CLASSES = (
    "survivor", "cellphone", "backpack", "drill", "extinguisher",
    "gas", "vent", "helmet", "rope", "cube",
)
# open-set label for detections that match no artifact class
CLASS_NONE = "none"


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class BoxSpec:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass
class ArtifactSpec:
    cls: str
    position: tuple[float, float, float]
    size: float = 0.5


@dataclass
class FogSpec:
    center: tuple[float, float, float]
    radius: float
    trigger: float


@dataclass
class DustSpec:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    density: float
    intensity_min: float = 1.0
    intensity_max: float = 25.0


@dataclass
class RobotSpec:
    name: str
    position: tuple[float, float, float]
    heading: float = 0.0
    priority: int = 0


@dataclass
class SensorsConfig:
    lidar_rings: int = 16
    lidar_azimuths: int = 360
    lidar_range: float = 50.0
    lidar_vfov_deg: float = 90.0
    lidar_rate: float = 5.0
    surface_intensity: tuple[float, float] = (40.0, 200.0)
    depth_width: int = 32
    depth_height: int = 24
    depth_fov_deg: float = 60.0
    depth_range: float = 8.0
    rgb_width: int = 320
    rgb_height: int = 240
    rgb_fov_deg: float = 70.0
    rgb_range: float = 12.0
    detector_rate: float = 5.0


@dataclass
class PerceptionConfig:
    filter_radius: float = 5.0          # kappa
    intensity_threshold: float = 30.0   # upsilon
    fog_grid_extent: tuple[float, float, float] = (6.0, 6.0, 4.0)
    fog_grid_voxel: float = 0.4
    fog_ratio: float = 0.7              # lambda
    landing_square: float = 1.2
    landing_inlier_ratio: float = 0.85
    landing_min_normal_z: float = 0.92
    landing_ransac_iters: int = 200
    landing_inlier_dist: float = 0.05


@dataclass
class EstimationConfig:
    drift_rate: float = 0.0             # m drift (1-sigma) per meter traveled, per axis
    heading_drift_rate: float = 0.0     # rad per meter traveled
    delay_mean: float = 0.111
    delay_jitter: float = 0.02
    max_delay: float = 1.0              # tau_max
    accel_noise: float = 0.5
    meas_noise: float = 0.02
    gyro_bias: float = 0.002
    rate: float = 100.0


@dataclass
class MappingConfig:
    resolution: float = 0.2
    hit_logodds: float = 0.85
    miss_logodds: float = -0.4
    clamp_logodds: float = 3.5
    occupied_threshold: float = 0.6     # log-odds above -> occupied
    free_threshold: float = -0.6        # log-odds below -> free
    max_refine_factor: int = 3
    sphere_min_radius: float = 0.8      # r_min
    sphere_safe_radius: float = 2.0     # r_safe
    sphere_samples: int = 150
    sphere_box: float = 20.0
    segment_max_size: float = 30.0
    facet_size: float = 0.5
    facet_normal_bucket_deg: float = 30.0
    facet_max_view_angle_deg: float = 60.0
    facet_box: float = 16.0
    map_update_rate: float = 2.0


@dataclass
class SearchConfig:
    c_frontier: float = 100.0           # c_F
    c_surface: float = 1.0              # c_S
    c_surface_flat: float = 5.0         # c_SF
    risk_avoidance: float = 1.0         # c_R in path cost
    return_margin: float = 0.9
    info_threshold: float = 2.0
    viewpoint_spacing: float = 1.5
    local_box: float = 15.0
    strategy: str = "DEI"               # GS | DEI
    vpe: bool = False
    vpe_detour_budget: float = 0.15
    momentum_penalty: float = 2.0       # c_m
    operator_bias: float = 1.0          # c_oc
    remote_cost_scale: float = 1.5      # D_R scale
    blocked_eps: float = 1e-3
    dwell_block_time: float = 60.0
    goal_timeout: float = 30.0
    goal_block_radius: float = 2.0
    info_rays_rings: int = 8
    info_rays_azimuths: int = 24
    coverage_block_threshold: float = 0.95
    sample_count: int = 40


@dataclass
class NavigationConfig:
    safety_distance: float = 0.6        # d_safe
    v_max: float = 2.0
    a_max: float = 2.0
    dt: float = 0.05
    corridor: float = 0.6
    carrot_distance: float = 20.0
    replan_rate: float = 0.5
    collision_check_rate: float = 5.0
    plan_lead_time: float = 0.6         # T_s
    progress_timeout: float = 30.0
    avoid_distance: float = 4.0         # d_avoid
    avoid_descend: float = 1.5          # delta-z
    shift_iters: int = 16


@dataclass
class MissionConfig:
    battery_capacity: float = 1500.0    # seconds of flight
    takeoff_height: float = 1.2
    ready_timeout: float = 5.0
    gate_position: tuple[float, float, float] | None = None
    landmap_resolution: float = 5.0
    blind_landing_height: float = 0.4
    land_verify_height: float = 1.0
    start_delay: float = 0.0            # per-robot stagger applied as index multiples


@dataclass
class DetectorConfig:
    p_detect: float = 0.9
    confusion: float = 0.8              # probability of correct class label
    box_jitter_px: float = 2.0
    false_positive_rate: float = 0.0    # per frame
    range_falloff: float = 0.0          # p_det multiplier slope with range
    confirm_threshold: int = 4
    n_desired: int = 64
    sample_rings: int = 5               # n_r
    sample_density: int = 16            # n_alpha
    hypothesis_floor: float = 0.04      # (0.2 m)^2
    measurement_floor: float = 0.01     # (0.1 m)^2
    assoc_sigma: float = 3.0            # l_thr at this many sigmas


@dataclass
class ArbiterConfig:
    report_budget: int = 8
    first_report_time: float = 100.0
    schedule: tuple[tuple[float, int], ...] = ()   # (time, cumulative allowed)
    w_robots: float = 0.25              # alpha
    w_confidence: float = 0.25          # beta
    w_detections: float = 0.25          # gamma
    w_prior: float = 0.25               # delta
    vicinity_radius: float = 5.0
    scoring_radius: float = 5.0
    robot_report_limit: int = 4
    robot_min_success: float = 0.34
    agree_radius: float = 5.0


@dataclass
class CommsConfig:
    range: float = 60.0
    drop: float = 0.1
    delay: tuple[float, float] = (0.02, 0.1)
    base: tuple[float, float, float] = (0.0, 0.0, 1.0)
    breadcrumbs: tuple[tuple[float, float, float], ...] = ()
    ltv_period: float = 2.0
    beacon_period: float = 1.0


@dataclass
class Scenario:
    name: str = "unnamed"
    voxel: float = 0.5
    bounds: BoxSpec | None = None
    boxes: list[BoxSpec] = field(default_factory=list)
    home: tuple[float, float, float] = (0.0, 0.0, 1.0)
    artifacts: list[ArtifactSpec] = field(default_factory=list)
    fog: list[FogSpec] = field(default_factory=list)
    dust: list[DustSpec] = field(default_factory=list)
    robots: list[RobotSpec] = field(default_factory=list)
    seed: int = 0
    duration: float = 120.0
    tick: float = 0.02
    share_maps: bool = True
    sensors: SensorsConfig = field(default_factory=SensorsConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    navigation: NavigationConfig = field(default_factory=NavigationConfig)
    mission: MissionConfig = field(default_factory=MissionConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    arbiter: ArbiterConfig = field(default_factory=ArbiterConfig)
    comms: CommsConfig = field(default_factory=CommsConfig)


# sections whose entries map 1:1 onto config dataclass fields
_CONFIG_SECTIONS = {
    "sensors": "sensors",
    "perception": "perception",
    "estimation": "estimation",
    "mapping": "mapping",
    "search": "search",
    "navigation": "navigation",
    "mission": "mission",
    "detector": "detector",
    "arbiter": "arbiter",
}


def _tokens(value: str) -> list[str]:
    return value.split()


def _floats(value: str, n: int, line: int) -> list[float]:
    toks = _tokens(value)
    if len(toks) != n:
        raise ScenarioError(f"expected {n} numbers, got {len(toks)}", line)
    try:
        return [float(t) for t in toks]
    except ValueError as exc:
        raise ScenarioError(str(exc), line) from None


def _coerce(current, toks: list[str], line: int):
    """Coerce raw tokens to the type of the dataclass default value."""
    if isinstance(current, bool):
        if len(toks) != 1 or toks[0] not in ("true", "false", "0", "1"):
            raise ScenarioError("expected true/false", line)
        return toks[0] in ("true", "1")
    if isinstance(current, int):
        if len(toks) != 1:
            raise ScenarioError("expected a single integer", line)
        return int(toks[0])
    if isinstance(current, float):
        if len(toks) != 1:
            raise ScenarioError("expected a single number", line)
        return float(toks[0])
    if isinstance(current, str):
        if len(toks) != 1:
            raise ScenarioError("expected a single word", line)
        return toks[0]
    if isinstance(current, tuple) or current is None:
        return tuple(float(t) for t in toks)
    raise ScenarioError(f"cannot parse value for type {type(current).__name__}", line)


def parse(text: str) -> Scenario:
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise ScenarioError(f"missing header {HEADER!r}", 1)

    scn = Scenario()
    section = None
    schedule: list[tuple[float, int]] = []
    breadcrumbs: list[tuple[float, float, float]] = []

    for ln, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            known = {"meta", "world", "artifacts", "fog", "dust", "robots",
                     "comms", "seed", "run", *_CONFIG_SECTIONS}
            if section not in known:
                raise ScenarioError(f"unknown section [{section}]", ln)
            continue
        if "=" not in line:
            raise ScenarioError("expected 'key = value'", ln)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if section is None:
            raise ScenarioError("entry before any [section]", ln)

        if section == "meta":
            if key == "version":
                if value != "1":
                    raise ScenarioError(f"unsupported version {value}", ln)
            elif key == "name":
                scn.name = value
            else:
                raise ScenarioError(f"unknown meta key {key!r}", ln)
        elif section == "world":
            if key == "voxel":
                scn.voxel = _floats(value, 1, ln)[0]
            elif key == "bounds":
                v = _floats(value, 6, ln)
                scn.bounds = BoxSpec(tuple(v[:3]), tuple(v[3:]))
            elif key == "box":
                v = _floats(value, 6, ln)
                scn.boxes.append(BoxSpec(tuple(v[:3]), tuple(v[3:])))
            elif key == "home":
                scn.home = tuple(_floats(value, 3, ln))
            else:
                raise ScenarioError(f"unknown world key {key!r}", ln)
        elif section == "artifacts":
            if key != "artifact":
                raise ScenarioError(f"unknown artifacts key {key!r}", ln)
            toks = _tokens(value)
            if len(toks) not in (4, 5):
                raise ScenarioError("artifact = class x y z [size]", ln)
            if toks[0] not in ARTIFACT_CLASSES:
                raise ScenarioError(f"unknown artifact class {toks[0]!r}", ln)
            pos = tuple(float(t) for t in toks[1:4])
            size = float(toks[4]) if len(toks) == 5 else 0.5
            scn.artifacts.append(ArtifactSpec(toks[0], pos, size))
        elif section == "fog":
            if key != "emitter":
                raise ScenarioError(f"unknown fog key {key!r}", ln)
            v = _floats(value, 5, ln)
            scn.fog.append(FogSpec(tuple(v[:3]), v[3], v[4]))
        elif section == "dust":
            if key != "zone":
                raise ScenarioError(f"unknown dust key {key!r}", ln)
            v = _floats(value, 9, ln)
            scn.dust.append(DustSpec(tuple(v[:3]), tuple(v[3:6]), v[6], v[7], v[8]))
        elif section == "robots":
            if key != "robot":
                raise ScenarioError(f"unknown robots key {key!r}", ln)
            toks = _tokens(value)
            if len(toks) not in (5, 6):
                raise ScenarioError("robot = name x y z heading [priority]", ln)
            prio = int(toks[5]) if len(toks) == 6 else len(scn.robots)
            scn.robots.append(RobotSpec(toks[0], tuple(float(t) for t in toks[1:4]),
                                        float(toks[4]), prio))
        elif section == "comms":
            if key == "breadcrumb":
                breadcrumbs.append(tuple(_floats(value, 3, ln)))
            elif key in ("range", "drop", "ltv_period", "beacon_period"):
                setattr(scn.comms, key, _floats(value, 1, ln)[0])
            elif key == "delay":
                scn.comms.delay = tuple(_floats(value, 2, ln))
            elif key == "base":
                scn.comms.base = tuple(_floats(value, 3, ln))
            else:
                raise ScenarioError(f"unknown comms key {key!r}", ln)
        elif section == "seed":
            if key != "seed":
                raise ScenarioError(f"unknown seed key {key!r}", ln)
            scn.seed = int(value)
        elif section == "run":
            if key == "duration":
                scn.duration = _floats(value, 1, ln)[0]
            elif key == "tick":
                scn.tick = _floats(value, 1, ln)[0]
            elif key == "share_maps":
                scn.share_maps = value in ("true", "1")
            else:
                raise ScenarioError(f"unknown run key {key!r}", ln)
        elif section in _CONFIG_SECTIONS:
            cfg = getattr(scn, _CONFIG_SECTIONS[section])
            if section == "arbiter" and key == "allow":
                v = _floats(value, 2, ln)
                schedule.append((v[0], int(v[1])))
                continue
            if not hasattr(cfg, key):
                raise ScenarioError(f"unknown {section} key {key!r}", ln)
            try:
                setattr(cfg, key, _coerce(getattr(cfg, key), _tokens(value), ln))
            except ScenarioError:
                raise
            except Exception as exc:
                raise ScenarioError(str(exc), ln) from None

    if schedule:
        scn.arbiter.schedule = tuple(schedule)
    if breadcrumbs:
        scn.comms.breadcrumbs = tuple(breadcrumbs)
    if not scn.robots:
        scn.robots.append(RobotSpec("uav1", scn.home, 0.0, 0))
    return scn


def load(path: str | Path) -> Scenario:
    return parse(Path(path).read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, "g")
    if isinstance(v, tuple):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def write(scn: Scenario) -> str:
    out = [HEADER, "", "[meta]", "version = 1", f"name = {scn.name}", ""]
    out.append("[world]")
    out.append(f"voxel = {_fmt(scn.voxel)}")
    if scn.bounds is not None:
        out.append(f"bounds = {_fmt(scn.bounds.lo)} {_fmt(scn.bounds.hi)}")
    for b in scn.boxes:
        out.append(f"box = {_fmt(b.lo)} {_fmt(b.hi)}")
    out.append(f"home = {_fmt(scn.home)}")
    out.append("")
    if scn.artifacts:
        out.append("[artifacts]")
        for a in scn.artifacts:
            out.append(f"artifact = {a.cls} {_fmt(a.position)} {_fmt(a.size)}")
        out.append("")
    if scn.fog:
        out.append("[fog]")
        for f in scn.fog:
            out.append(f"emitter = {_fmt(f.center)} {_fmt(f.radius)} {_fmt(f.trigger)}")
        out.append("")
    if scn.dust:
        out.append("[dust]")
        for d in scn.dust:
            out.append(f"zone = {_fmt(d.lo)} {_fmt(d.hi)} {_fmt(d.density)}"
                       f" {_fmt(d.intensity_min)} {_fmt(d.intensity_max)}")
        out.append("")
    out.append("[robots]")
    for r in scn.robots:
        out.append(f"robot = {r.name} {_fmt(r.position)} {_fmt(r.heading)} {r.priority}")
    out.append("")
    out.append("[comms]")
    out.append(f"range = {_fmt(scn.comms.range)}")
    out.append(f"drop = {_fmt(scn.comms.drop)}")
    out.append(f"delay = {_fmt(scn.comms.delay)}")
    out.append(f"base = {_fmt(scn.comms.base)}")
    for bc in scn.comms.breadcrumbs:
        out.append(f"breadcrumb = {_fmt(bc)}")
    out.append(f"ltv_period = {_fmt(scn.comms.ltv_period)}")
    out.append(f"beacon_period = {_fmt(scn.comms.beacon_period)}")
    out.append("")
    out.append("[run]")
    out.append(f"duration = {_fmt(scn.duration)}")
    out.append(f"tick = {_fmt(scn.tick)}")
    out.append(f"share_maps = {_fmt(scn.share_maps)}")
    out.append("")
    for section, attr in _CONFIG_SECTIONS.items():
        cfg = getattr(scn, attr)
        default = type(cfg)()
        lines = []
        for f in fields(cfg):
            val = getattr(cfg, f.name)
            if section == "arbiter" and f.name == "schedule":
                for t, n in val:
                    lines.append(f"allow = {_fmt(t)} {n}")
                continue
            if val != getattr(default, f.name):
                lines.append(f"{f.name} = {_fmt(val)}")
        if lines:
            out.append(f"[{section}]")
            out.extend(lines)
            out.append("")
    out.append("[seed]")
    out.append(f"seed = {scn.seed}")
    out.append("")
    return "\n".join(out)


def save(scn: Scenario, path: str | Path) -> None:
    Path(path).write_text(write(scn), encoding="utf-8")
