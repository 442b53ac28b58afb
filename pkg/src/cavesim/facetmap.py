"""Surfel map of binary camera coverage built from occupancy normals.

A facet is a fixed-size oriented disc anchored on the surface of the
occupancy map. At most one facet exists per (facet-grid cell, normal
bucket); covered facets persist even when the supporting occupancy
disappears, so coverage is monotone over a mission.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .densemap import DenseMap
from .geometry import Aabb, Pose
from .sensors import RgbCameraModel

# 26 quantization directions for normal buckets (~30-45 degrees apart)
_BUCKET_DIRS = np.array([
    [sx, sy, sz]
    for sx in (-1, 0, 1) for sy in (-1, 0, 1) for sz in (-1, 0, 1)
    if (sx, sy, sz) != (0, 0, 0)
], dtype=float)
_BUCKET_DIRS /= np.linalg.norm(_BUCKET_DIRS, axis=1, keepdims=True)


def normal_bucket(normal: np.ndarray) -> int:
    return int(np.argmax(_BUCKET_DIRS @ np.asarray(normal, dtype=float)))


@dataclass
class Facet:
    center: np.ndarray
    normal: np.ndarray
    covered: bool = False


@dataclass
class FacetMapConfig:
    facet_size: float = 0.5
    max_view_angle_deg: float = 60.0
    update_box: float = 16.0
    fit_radius_cells: int = 2


class FacetMap:
    def __init__(self, cfg: FacetMapConfig | None = None):
        self.cfg = cfg or FacetMapConfig()
        self.facets: dict[tuple[int, int, int, int], Facet] = {}

    def __len__(self) -> int:
        return len(self.facets)

    def _key(self, center: np.ndarray, bucket: int) -> tuple[int, int, int, int]:
        s = self.cfg.facet_size
        return (int(math.floor(center[0] / s)), int(math.floor(center[1] / s)),
                int(math.floor(center[2] / s)), bucket)

    def update(self, densemap: DenseMap, robot_pose: Pose) -> None:
        """Add/refresh facets from occupancy normals near the robot.

        Normals come from a local plane fit over neighboring occupied cell
        centers and are oriented toward the robot. Facets whose supporting
        occupancy vanished are dropped unless already covered.
        """
        occupied = densemap.occupied_centers()
        if len(occupied) == 0:
            return
        box = self.cfg.update_box
        robot = robot_pose.position
        near = np.all(np.abs(occupied - robot) <= box / 2.0, axis=1)
        pts = occupied[near]
        res = densemap.cfg.resolution
        fit_r = self.cfg.fit_radius_cells * res

        live_keys = set()
        if len(pts):
            from scipy.spatial import cKDTree
            tree = cKDTree(occupied)
            groups = tree.query_ball_point(pts, fit_r)
            for p, idx in zip(pts, groups):
                neigh = occupied[idx]
                if len(neigh) < 3:
                    continue
                centered = neigh - neigh.mean(axis=0)
                _, _, vt = np.linalg.svd(centered, full_matrices=False)
                normal = vt[-1]
                to_robot = robot - p
                if normal @ to_robot < 0.0:
                    normal = -normal
                norm = float(np.linalg.norm(normal))
                if norm < 1e-12:
                    continue
                normal = normal / norm
                key = self._key(p, normal_bucket(normal))
                live_keys.add(key)
                if key not in self.facets:
                    self.facets[key] = Facet(p.copy(), normal)
        # drop uncovered facets in the update box that lost their support
        for key in list(self.facets.keys()):
            facet = self.facets[key]
            if facet.covered:
                continue
            if np.all(np.abs(facet.center - robot) <= box / 2.0) and key not in live_keys:
                del self.facets[key]

    def mark_coverage(self, camera_body_pose: Pose, model: RgbCameraModel,
                      densemap: DenseMap,
                      max_view_angle_deg: float | None = None) -> int:
        """Mark facets covered by this camera view; returns newly covered count."""
        changed = self._coverage_set(camera_body_pose, model, densemap,
                                     max_view_angle_deg)
        newly = 0
        for key in changed:
            if not self.facets[key].covered:
                self.facets[key].covered = True
                newly += 1
        return newly

    def coverage_gain(self, camera_body_pose: Pose, model: RgbCameraModel,
                      densemap: DenseMap) -> int:
        """Facets a view WOULD newly cover (no mutation)."""
        changed = self._coverage_set(camera_body_pose, model, densemap, None)
        return sum(1 for key in changed if not self.facets[key].covered)

    def _coverage_set(self, body_pose: Pose, model: RgbCameraModel,
                      densemap: DenseMap,
                      max_view_angle_deg: float | None) -> list:
        if not self.facets:
            return []
        limit = math.radians(max_view_angle_deg if max_view_angle_deg is not None
                             else self.cfg.max_view_angle_deg)
        cam = model.camera_pose(body_pose)
        keys = sorted(self.facets.keys())
        centers = np.array([self.facets[k].center for k in keys])
        normals = np.array([self.facets[k].normal for k in keys])
        rel = cam.inverse_transform(centers)
        uv, in_front = model.project(rel)
        dist = np.linalg.norm(rel, axis=1)
        visible = in_front & model.in_image(uv) & (dist <= model.max_range) & (dist > 1e-9)
        if not np.any(visible):
            return []
        rays = centers[visible] - cam.position
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        # viewing angle between the ray and the anti-normal
        cosang = -np.sum(rays * normals[visible], axis=1)
        angle_ok = cosang >= math.cos(limit)
        idx = np.flatnonzero(visible)[angle_ok]
        if len(idx) == 0:
            return []
        blocked = densemap.segments_blocked(cam.position, centers[idx], margin=1.5)
        return [keys[i] for i, b in zip(idx, blocked) if not b]

    # -- queries -----------------------------------------------------------

    def coverage_ratio(self, region: Aabb | None = None,
                       member_fn=None) -> float:
        """Covered fraction of facets inside a region (empty region -> 1).

        ``member_fn`` may be given instead of a box for arbitrary regions
        (e.g. a rotated segment bounding box); it receives an (N,3) array
        and returns a boolean mask.
        """
        keys = sorted(self.facets.keys())
        if not keys:
            return 1.0
        centers = np.array([self.facets[k].center for k in keys])
        if member_fn is not None:
            mask = np.asarray(member_fn(centers), dtype=bool)
        elif region is not None:
            mask = region.contains_many(centers)
        else:
            mask = np.ones(len(keys), dtype=bool)
        total = int(mask.sum())
        if total == 0:
            return 1.0
        covered = sum(1 for k, m in zip(keys, mask) if m and self.facets[k].covered)
        return covered / total

    def uncovered_centers(self) -> np.ndarray:
        pts = [f.center for k, f in sorted(self.facets.items()) if not f.covered]
        return np.array(pts) if pts else np.zeros((0, 3))

    def covered_count(self) -> int:
        return sum(1 for f in self.facets.values() if f.covered)

    def to_csv(self) -> str:
        lines = ["x,y,z,nx,ny,nz,covered"]
        for key in sorted(self.facets.keys()):
            f = self.facets[key]
            lines.append(f"{f.center[0]:.3f},{f.center[1]:.3f},{f.center[2]:.3f},"
                         f"{f.normal[0]:.3f},{f.normal[1]:.3f},{f.normal[2]:.3f},"
                         f"{int(f.covered)}")
        return "\n".join(lines) + "\n"

