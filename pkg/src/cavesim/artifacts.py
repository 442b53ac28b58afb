"""Artifact pipeline: synthetic detector, detection position estimation,
multi-hypothesis localization filter, and the base-station reporting
arbiter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .densemap import DenseMap, RayKind
from .geometry import Pose
from .scenario import ARTIFACT_CLASSES, CLASS_NONE, ArbiterConfig, DetectorConfig
from .sensors import PointCloud, RgbCameraModel
from .world import World


@dataclass
class Detection:
    corners: np.ndarray              # (4,2) undistorted pixels c1..c4
    class_scores: dict[str, float]   # over classes, sums to 1
    confidence: float
    camera: int
    stamp: float
    robot: int = 0
    source_uid: int = -1             # ground-truth artifact id (sim metadata)

    def __post_init__(self) -> None:
        self.corners = np.asarray(self.corners, dtype=float).reshape(4, 2)

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    @property
    def width(self) -> float:
        return float(self.corners[:, 0].max() - self.corners[:, 0].min())

    @property
    def height(self) -> float:
        return float(self.corners[:, 1].max() - self.corners[:, 1].min())

    def best_class(self) -> str:
        return max(sorted(self.class_scores), key=lambda c: self.class_scores[c])


def detector_model(visible: list[tuple[int, np.ndarray, float]], world: World,
                   cfg: DetectorConfig, rng: np.random.Generator,
                   camera: RgbCameraModel, camera_id: int, stamp: float,
                   robot: int = 0) -> list[Detection]:
    """Synthetic CNN stand-in over ground-truth visibility.

    Each visible artifact is detected with probability p_detect scaled by
    (1 - occlusion) and range falloff; the class label passes through a
    confusion model, the box gets pixel jitter, and false positives are
    injected at the configured rate.
    """
    out: list[Detection] = []
    for (uid, box, occlusion) in visible:
        art = world.artifacts[uid]
        p = cfg.p_detect * (1.0 - occlusion)
        if cfg.range_falloff > 0.0:
            # soft linear falloff with distance is applied by the caller via
            # visibility; the knob stays for scenario tuning
            p *= max(0.0, 1.0 - cfg.range_falloff)
        if rng.uniform() > p:
            continue
        corners = box + rng.normal(0.0, cfg.box_jitter_px, size=box.shape)
        corners[:, 0] = np.clip(corners[:, 0], 0, camera.width)
        corners[:, 1] = np.clip(corners[:, 1], 0, camera.height)
        scores = _confused_scores(art.cls, cfg.confusion, rng)
        conf = float(rng.uniform(0.5, 1.0))
        out.append(Detection(corners, scores, conf, camera_id, stamp, robot,
                             source_uid=uid))
    n_fp = rng.poisson(cfg.false_positive_rate) if cfg.false_positive_rate > 0 else 0
    for _ in range(n_fp):
        cx = rng.uniform(0.1, 0.9) * camera.width
        cy = rng.uniform(0.1, 0.9) * camera.height
        w = rng.uniform(10, 60)
        h = rng.uniform(10, 60)
        corners = np.array([[cx - w / 2, cy - h / 2], [cx + w / 2, cy - h / 2],
                            [cx + w / 2, cy + h / 2], [cx - w / 2, cy + h / 2]])
        cls = ARTIFACT_CLASSES[int(rng.integers(len(ARTIFACT_CLASSES)))]
        out.append(Detection(corners, _confused_scores(cls, 0.5, rng),
                             float(rng.uniform(0.2, 0.6)), camera_id, stamp, robot))
    return out


def _confused_scores(true_cls: str, correct_p: float,
                     rng: np.random.Generator) -> dict[str, float]:
    labels = list(ARTIFACT_CLASSES) + [CLASS_NONE]
    if rng.uniform() < correct_p:
        label = true_cls
    else:
        others = [c for c in labels if c != true_cls]
        label = others[int(rng.integers(len(others)))]
    scores = {c: 0.0 for c in labels}
    scores[label] = 0.8
    # spread the remainder uniformly
    spread = 0.2 / (len(labels) - 1)
    for c in labels:
        if c != label:
            scores[c] = spread
    return scores


# -- position estimation ------------------------------------------------------


class NoPositionEstimate(ValueError):
    """No usable 3D points were found for a detection."""


@dataclass
class PositionEstimate:
    position: np.ndarray            # d
    covariance: np.ndarray          # Q_d, eigenvalue-floored
    n_points: int


def bbox_weight(uv: np.ndarray, center: np.ndarray, width: float,
                height: float) -> np.ndarray:
    """Box-center weighting: 1 at the center, 0 at the box edge.

    w = (1 - 2|du|/w_bb)^2 (1 - 2|dv|/h_bb)^2, zero outside the box.
    """
    uv = np.atleast_2d(uv)
    du = np.abs(uv[:, 0] - center[0])
    dv = np.abs(uv[:, 1] - center[1])
    wu = 1.0 - 2.0 * du / max(width, 1e-9)
    wv = 1.0 - 2.0 * dv / max(height, 1e-9)
    w = np.where((wu >= 0.0) & (wv >= 0.0), (wu ** 2) * (wv ** 2), 0.0)
    return w


def floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    """Rescale eigenvalues so none falls below ``floor`` (keeps symmetry)."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    return vecs @ np.diag(vals) @ vecs.T


def sample_rectangle(corners: np.ndarray, n_remaining: int,
                     camera: RgbCameraModel, cam_pose: Pose,
                     densemap: DenseMap, rng: np.random.Generator,
                     n_radial: int = 5, n_density: int = 16,
                     max_range: float = 30.0) -> list[np.ndarray]:
    """Raycast occupancy samples on inscribed ellipses of the bounding box.

    Rings sweep outward with a per-ring random angular offset; each pixel
    is unprojected and cast into the map until enough points accumulate.
    """
    if n_remaining <= 0:
        return []
    c0 = corners.mean(axis=0)
    w = float(corners[:, 0].max() - corners[:, 0].min())
    h = float(corners[:, 1].max() - corners[:, 1].min())
    out: list[np.ndarray] = []
    for j in range(n_radial + 1):
        r = j / n_radial
        if r == 0.0:
            pix = [c0]
        else:
            n_steps = max(1, int(math.ceil(2.0 * math.pi * r * n_density)))
            offset = rng.uniform(-math.pi, math.pi)
            angles = offset + 2.0 * math.pi * np.arange(n_steps) / n_steps
            pix = [c0 + np.array([w * r * math.cos(a) / 2.0,
                                  h * r * math.sin(a) / 2.0]) for a in angles]
        for p in pix:
            ray_cam = camera.unproject(p[None, :])[0]
            ray_world = cam_pose.rotation @ ray_cam
            hit = densemap.raycast(cam_pose.position, ray_world, max_range)
            if hit is None or hit.kind != RayKind.OCCUPIED:
                continue
            out.append(hit.point)
            if len(out) >= n_remaining:
                return out
    return out


def estimate_position(det: Detection, cloud_cam: PointCloud | None,
                      densemap: DenseMap, camera: RgbCameraModel,
                      cam_pose: Pose, cfg: DetectorConfig,
                      rng: np.random.Generator) -> PositionEstimate:
    """3D position and covariance of a detection.

    Points inside the bounding-box frustum of the latest lidar cloud are
    the primary source; the occupancy map is raycast over the box to top up
    to ``n_desired``. The weighted mean/covariance uses the box-center
    weighting, and the covariance is eigenvalue-floored to cover the
    degenerate planar / collapsed cases. World-frame output.
    """
    points_world: list[np.ndarray] = []
    if cloud_cam is not None and len(cloud_cam):
        uv, in_front = camera.project(cloud_cam.points)
        in_u = ((uv[:, 0] >= det.corners[:, 0].min())
                & (uv[:, 0] <= det.corners[:, 0].max()))
        in_v = ((uv[:, 1] >= det.corners[:, 1].min())
                & (uv[:, 1] <= det.corners[:, 1].max()))
        pts = cloud_cam.points[in_front & in_u & in_v]
        points_world.extend(cam_pose.transform(pts))
    if len(points_world) < cfg.n_desired:
        points_world.extend(sample_rectangle(
            det.corners, cfg.n_desired - len(points_world), camera, cam_pose,
            densemap, rng, cfg.sample_rings, cfg.sample_density))
    if not points_world:
        raise NoPositionEstimate("no lidar or map points behind the detection box")
    pts = np.vstack(points_world)
    uv, _ = camera.project(cam_pose.inverse_transform(pts))
    w = bbox_weight(uv, det.center, det.width, det.height)
    if float(w.sum()) <= 1e-12:
        w = np.ones(len(pts))
    w = w / w.sum()
    d = (pts * w[:, None]).sum(axis=0)
    diff = pts - d
    denom = 1.0 - float((w ** 2).sum())
    if denom <= 1e-9:
        cov = np.zeros((3, 3))
    else:
        cov = (w[:, None, None] * (diff[:, :, None] * diff[:, None, :])).sum(axis=0) / denom
    cov = floor_covariance(cov, cfg.measurement_floor)
    return PositionEstimate(d, cov, len(pts))


# -- localization filter -----------------------------------------------------


@dataclass
class ArtifactHypothesis:
    hid: int
    position: np.ndarray             # x-hat
    covariance: np.ndarray           # P
    class_probs: dict[str, float]    # p_H over classes
    n_detections: int
    robot: int
    stamp: float
    confidence_sum: float = 0.0
    representative: Detection | None = None
    reporters: set[int] = field(default_factory=set)

    @property
    def confirmed(self) -> bool:
        return self.n_detections >= 4

    def best_class(self) -> str:
        return max(sorted(self.class_probs), key=lambda c: self.class_probs[c])

    @property
    def mean_confidence(self) -> float:
        return self.confidence_sum / max(self.n_detections, 1)


def gaussian_density(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    diff = np.asarray(x) - np.asarray(mean)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        return 0.0
    quad = float(diff @ np.linalg.solve(cov, diff))
    return float(math.exp(-0.5 * quad - 0.5 * logdet
                          - 1.5 * math.log(2.0 * math.pi)))


class ArtifactFilter:
    """Per-robot multi-hypothesis artifact localization filter.

    No prediction step is performed (artifacts are static); the covariance
    is floored after each update so association never starves.
    """

    def __init__(self, cfg: DetectorConfig, robot: int = 0):
        self.cfg = cfg
        self.robot = robot
        self.hypotheses: dict[int, ArtifactHypothesis] = {}
        self._next_hid = 0
        # likelihood threshold: density of a 3-sigma point of the floored
        # measurement model
        floor_cov = np.eye(3) * (cfg.hypothesis_floor + cfg.measurement_floor)
        x = np.array([cfg.assoc_sigma * math.sqrt(floor_cov[0, 0]), 0.0, 0.0])
        self.l_thr = gaussian_density(x, np.zeros(3), floor_cov)

    def associate(self, detections: list[tuple[Detection, PositionEstimate]]
                  ) -> tuple[dict[int, int], list[int]]:
        """Assign at most one detection per hypothesis by peak likelihood.

        Returns (hypothesis id -> detection index, unassigned detection
        indices). Assignment is detection-exclusive and deterministic:
        candidate pairs are ranked by likelihood with ties broken by
        detection stamp then index.
        """
        pairs = []
        for hid in sorted(self.hypotheses):
            hyp = self.hypotheses[hid]
            for di, (det, est) in enumerate(detections):
                l = gaussian_density(est.position, hyp.position,
                                     est.covariance + hyp.covariance)
                if l > self.l_thr:
                    pairs.append((-l, det.stamp, di, hid))
        pairs.sort()
        assigned: dict[int, int] = {}
        used_d: set[int] = set()
        for (_negl, _stamp, di, hid) in pairs:
            if hid in assigned or di in used_d:
                continue
            assigned[hid] = di
            used_d.add(di)
        unassigned = [di for di in range(len(detections)) if di not in used_d]
        return assigned, unassigned

    def update_hypothesis(self, hyp: ArtifactHypothesis, det: Detection,
                          est: PositionEstimate) -> None:
        """Kalman update with H = I, then class mixing and the P floor."""
        p = hyp.covariance
        k = p @ np.linalg.inv(p + est.covariance)
        hyp.position = hyp.position + k @ (est.position - hyp.position)
        hyp.covariance = floor_covariance((np.eye(3) - k) @ p,
                                          self.cfg.hypothesis_floor)
        n = hyp.n_detections
        labels = set(hyp.class_probs) | set(det.class_scores)
        hyp.class_probs = {
            c: (n * hyp.class_probs.get(c, 0.0) + det.class_scores.get(c, 0.0))
               / (n + 1)
            for c in sorted(labels)}
        hyp.n_detections = n + 1
        hyp.confidence_sum += det.confidence
        hyp.stamp = det.stamp
        if hyp.representative is None or det.confidence > hyp.representative.confidence:
            hyp.representative = det

    def spawn(self, det: Detection, est: PositionEstimate) -> ArtifactHypothesis:
        hyp = ArtifactHypothesis(
            hid=self._next_hid, position=est.position.copy(),
            covariance=floor_covariance(est.covariance, self.cfg.hypothesis_floor),
            class_probs=dict(det.class_scores), n_detections=1,
            robot=self.robot, stamp=det.stamp,
            confidence_sum=det.confidence, representative=det)
        self._next_hid += 1
        self.hypotheses[hyp.hid] = hyp
        return hyp

    def step(self, detections: list[tuple[Detection, PositionEstimate]]) -> None:
        assigned, unassigned = self.associate(detections)
        for hid in sorted(assigned):
            det, est = detections[assigned[hid]]
            self.update_hypothesis(self.hypotheses[hid], det, est)
        for di in unassigned:
            det, est = detections[di]
            self.spawn(det, est)

    def confirmed(self) -> list[ArtifactHypothesis]:
        return [self.hypotheses[h] for h in sorted(self.hypotheses)
                if self.hypotheses[h].confirmed]


# -- arbiter --------------------------------------------------------------------


@dataclass
class Report:
    position: np.ndarray
    cls: str
    robot: int
    time: float
    scored: bool


@dataclass
class ReportLedger:
    budget: int
    schedule: tuple[tuple[float, int], ...]     # (time, cumulative allowed)
    reports: list[Report] = field(default_factory=list)

    def allowed_now(self, now: float) -> int:
        allowed = 0
        for (t, n) in sorted(self.schedule):
            if now >= t:
                allowed = n
        return min(allowed, self.budget)

    def remaining(self, now: float) -> int:
        return max(0, self.allowed_now(now) - len(self.reports))

    def robot_counts(self) -> dict[int, tuple[int, int]]:
        """robot -> (reports, successes)."""
        out: dict[int, tuple[int, int]] = {}
        for rep in self.reports:
            n, s = out.get(rep.robot, (0, 0))
            out[rep.robot] = (n + 1, s + (1 if rep.scored else 0))
        return out


def percentile_of(values: list[float], v: float) -> float:
    """Mid-rank percentile of v among values (0..1]."""
    if not values:
        return 0.0
    less = sum(1 for x in values if x < v - 1e-12)
    equal = sum(1 for x in values if abs(x - v) <= 1e-12)
    return (less + 0.5 * equal) / len(values)


class Arbiter:
    """Base-station report selection under a schedule and budget."""

    def __init__(self, cfg: ArbiterConfig, course: "object | None" = None,
                 class_priors: dict[str, float] | None = None):
        self.cfg = cfg
        self.course = course                  # Aabb or None (no area filter)
        self.class_priors = class_priors or {c: 1.0 / len(ARTIFACT_CLASSES)
                                             for c in ARTIFACT_CLASSES}
        schedule = cfg.schedule or ((cfg.first_report_time, 1),)
        self.ledger = ReportLedger(cfg.report_budget, tuple(schedule))

    def filter_hypotheses(self, hyps: list[ArtifactHypothesis]
                          ) -> list[ArtifactHypothesis]:
        """Drop out-of-course, near-prior-report (same class), and
        over-budget/low-success-robot hypotheses."""
        cfg = self.cfg
        counts = self.ledger.robot_counts()
        out = []
        for h in hyps:
            if self.course is not None and not self.course.contains(tuple(h.position)):
                continue
            cls = h.best_class()
            near_prior = False
            for rep in self.ledger.reports:
                if rep.cls != cls:
                    continue
                if np.linalg.norm(rep.position - h.position) <= cfg.vicinity_radius:
                    near_prior = True
                    break
            if near_prior:
                continue
            n, s = counts.get(h.robot, (0, 0))
            if n >= cfg.robot_report_limit and (s / n) < cfg.robot_min_success:
                continue
            out.append(h)
        return out

    def performance_index(self, h: ArtifactHypothesis,
                          pool: list[ArtifactHypothesis],
                          robot_agreement: dict[int, int]) -> float:
        cfg = self.cfg
        p_r = percentile_of([robot_agreement.get(x.hid, 1) for x in pool],
                            robot_agreement.get(h.hid, 1))
        p_c = percentile_of([x.mean_confidence for x in pool], h.mean_confidence)
        p_n = percentile_of([float(x.n_detections) for x in pool],
                            float(h.n_detections))
        prior = self.class_priors.get(h.best_class(), 0.0)
        p_a = percentile_of([self.class_priors.get(x.best_class(), 0.0)
                             for x in pool], prior)
        return (cfg.w_robots * p_r + cfg.w_confidence * p_c
                + cfg.w_detections * p_n + cfg.w_prior * p_a)

    def _robot_agreement(self, pool: list[ArtifactHypothesis]) -> dict[int, int]:
        """Hypothesis -> number of distinct robots with a similar one."""
        out = {}
        for h in pool:
            robots = {h.robot}
            for o in pool:
                if o.hid == h.hid or o.robot == h.robot:
                    continue
                if (o.best_class() == h.best_class()
                        and np.linalg.norm(o.position - h.position)
                        <= self.cfg.agree_radius):
                    robots.add(o.robot)
            out[h.hid] = len(robots)
        return out

    def step(self, hypotheses: list[ArtifactHypothesis], now: float,
             world: World | None = None) -> Report | None:
        """Submit the best hypothesis if the schedule allows a report now."""
        if self.ledger.remaining(now) <= 0:
            return None
        pool = self.filter_hypotheses([h for h in hypotheses if h.confirmed])
        if not pool:
            return None
        agreement = self._robot_agreement(pool)
        scored_pool = sorted(
            pool, key=lambda h: (-self.performance_index(h, pool, agreement), h.hid))
        best = scored_pool[0]
        scored = False
        if world is not None:
            for art in world.artifacts:
                if (art.cls == best.best_class()
                        and np.linalg.norm(np.asarray(art.position) - best.position)
                        <= self.cfg.scoring_radius):
                    scored = True
                    break
        report = Report(best.position.copy(), best.best_class(), best.robot,
                        now, scored)
        self.ledger.reports.append(report)
        return report
