"""Local perception: intensity-based noise filtering, fog detection,
landing-spot classification."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import Pose
from .sensors import PointCloud


@dataclass
class NoiseFilterConfig:
    radius: float = 5.0             # kappa, m
    intensity_threshold: float = 30.0   # upsilon

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("filter radius must be positive")
        if self.intensity_threshold < 0:
            raise ValueError("intensity threshold must be non-negative")


def filter_noise(cloud: PointCloud, cfg: NoiseFilterConfig) -> PointCloud:
    """Keep points beyond the local radius, or bright enough inside it.

    A point p survives iff ||p|| >= radius, or I(p) > threshold (strict).
    Single vectorized pass, order preserving, O(n).
    """
    if len(cloud) == 0:
        return PointCloud.empty(cloud.stamp, cloud.frame)
    dist = np.linalg.norm(cloud.points, axis=1)
    keep = (dist >= cfg.radius) | (cloud.intensity > cfg.intensity_threshold)
    return PointCloud(cloud.points[keep], cloud.intensity[keep], cloud.stamp, cloud.frame)


@dataclass
class FogDetectorConfig:
    ratio: float = 0.7                  # lambda in (0, 1]
    grid_extent: tuple[float, float, float] = (6.0, 6.0, 4.0)
    grid_voxel: float = 0.4
    max_occupancy: int = 0              # R: voxel count reachable by the sensor FOV

    def __post_init__(self) -> None:
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError("ratio must be in (0, 1]")
        if self.max_occupancy <= 0:
            raise ValueError("max_occupancy must be precomputed per sensor (> 0)")

    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(int(round(e / self.grid_voxel)) for e in self.grid_extent)


def fov_occupancy_limit(dirs: np.ndarray, max_range: float,
                        grid_extent: tuple[float, float, float],
                        grid_voxel: float) -> int:
    """Count local-grid voxels whose center a sensor ray set can reach.

    Precomputes R for :class:`FogDetectorConfig` by sweeping each ray
    through the grid and collecting touched voxels.
    """
    shape = tuple(int(round(e / grid_voxel)) for e in grid_extent)
    half = np.asarray(grid_extent) / 2.0
    step = grid_voxel / 3.0
    reach = min(max_range, float(np.linalg.norm(half)) + grid_voxel)
    ts = np.arange(step, reach, step)
    pts = ts[:, None, None] * np.asarray(dirs)[None, :, :]
    pts = pts.reshape(-1, 3)
    idx = np.floor((pts + half) / grid_voxel).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.asarray(shape)), axis=1)
    idx = idx[ok]
    flat = (idx[:, 0] * shape[1] + idx[:, 1]) * shape[2] + idx[:, 2]
    return int(len(np.unique(flat)))


def detect_fog(cloud: PointCloud, cfg: FogDetectorConfig) -> tuple[bool, int]:
    """Occupancy-ratio fog test on a sensor-frame cloud.

    Builds a local voxel grid centered on the sensor, counts occupied
    voxels r, and flags fog when r > ratio * max_occupancy (strict).
    """
    if len(cloud) == 0:
        return False, 0
    shape = cfg.grid_shape()
    half = np.asarray(cfg.grid_extent) / 2.0
    idx = np.floor((cloud.points + half) / cfg.grid_voxel).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.asarray(shape)), axis=1)
    idx = idx[ok]
    if len(idx) == 0:
        return False, 0
    flat = (idx[:, 0] * shape[1] + idx[:, 1]) * shape[2] + idx[:, 2]
    r = int(len(np.unique(flat)))
    return r > cfg.ratio * cfg.max_occupancy, r


class Landability(Enum):
    SAFE = "SAFE"
    UNSAFE = "UNSAFE"


@dataclass
class LandingDetectorConfig:
    square: float = 1.2                 # s, m
    min_inlier_ratio: float = 0.85      # I_min
    min_normal_z: float = 0.92          # N_min^z
    ransac_iters: int = 200
    inlier_dist: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.min_inlier_ratio <= 1.0:
            raise ValueError("min_inlier_ratio must be in (0, 1]")
        if not 0.0 < self.min_normal_z <= 1.0:
            raise ValueError("min_normal_z must be in (0, 1]")


@dataclass
class LandingResult:
    classification: Landability
    position: np.ndarray | None         # p_W, world frame
    inlier_ratio: float = 0.0
    normal: np.ndarray | None = None
    reason: str = ""


def _fit_plane_ransac(pts: np.ndarray, iters: int, inlier_dist: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, float, np.ndarray]:
    """Returns (unit normal, offset d with n.p = d, inlier mask) of the best plane."""
    n_pts = len(pts)
    best_mask = np.zeros(n_pts, dtype=bool)
    best_n = np.array([0.0, 0.0, 1.0])
    best_d = 0.0
    for _ in range(iters):
        sel = rng.choice(n_pts, size=3, replace=False)
        a, b, c = pts[sel]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        d = float(n @ a)
        mask = np.abs(pts @ n - d) <= inlier_dist
        if mask.sum() > best_mask.sum():
            best_mask, best_n, best_d = mask, n, d
    if best_mask.sum() >= 3:
        # least-squares refit on inliers
        sel_pts = pts[best_mask]
        centroid = sel_pts.mean(axis=0)
        _, _, vt = np.linalg.svd(sel_pts - centroid)
        n = vt[-1]
        d = float(n @ centroid)
        mask = np.abs(pts @ n - d) <= inlier_dist
        if mask.sum() >= best_mask.sum():
            best_mask, best_n, best_d = mask, n, d
    return best_n, best_d, best_mask


def detect_landing(frame: PointCloud, sensor_pose: Pose,
                   cfg: LandingDetectorConfig,
                   rng: np.random.Generator) -> LandingResult:
    """Classify the ground under a downward depth frame as safe to land on.

    Follows the crop / plane-fit / normal-check cascade: the frame-center
    square of side ``square`` meters must be fully observed, fit a plane by
    RANSAC with at least ``min_inlier_ratio`` inliers, and the plane normal
    in the gravity-aligned world frame must stay within the tilt bound.
    """
    if len(frame) < 3:
        return LandingResult(Landability.UNSAFE, None, reason="too few points")
    pts_world = sensor_pose.transform(frame.points)
    center = pts_world.mean(axis=0)
    half = cfg.square / 2.0
    rel = pts_world[:, :2] - center[None, :2]
    crop = (np.abs(rel[:, 0]) <= half) & (np.abs(rel[:, 1]) <= half)
    cropped = pts_world[crop]
    if len(cropped) < 12:
        return LandingResult(Landability.UNSAFE, None, reason="frame smaller than square")
    ext = cropped[:, :2].max(axis=0) - cropped[:, :2].min(axis=0)
    if ext[0] < cfg.square * 0.9 or ext[1] < cfg.square * 0.9:
        # footprint smaller than the required square: too close to decide
        return LandingResult(Landability.UNSAFE, None, reason="frame smaller than square")
    normal, _, mask = _fit_plane_ransac(cropped, cfg.ransac_iters, cfg.inlier_dist, rng)
    ratio = float(mask.mean())
    if ratio < cfg.min_inlier_ratio:
        return LandingResult(Landability.UNSAFE, None, ratio, normal, "not planar")
    if abs(normal[2]) < cfg.min_normal_z:
        return LandingResult(Landability.UNSAFE, None, ratio, normal, "too steep")
    p_w = cropped.mean(axis=0)
    return LandingResult(Landability.SAFE, p_w, ratio, normal, "")


def landing_config_from(perception_cfg) -> LandingDetectorConfig:
    return LandingDetectorConfig(
        square=perception_cfg.landing_square,
        min_inlier_ratio=perception_cfg.landing_inlier_ratio,
        min_normal_z=perception_cfg.landing_min_normal_z,
        ransac_iters=perception_cfg.landing_ransac_iters,
        inlier_dist=perception_cfg.landing_inlier_dist,
    )


def noise_config_from(perception_cfg) -> NoiseFilterConfig:
    return NoiseFilterConfig(radius=perception_cfg.filter_radius,
                             intensity_threshold=perception_cfg.intensity_threshold)
