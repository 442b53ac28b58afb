"""Simulated sensing: spinning lidar, depth camera, RGB camera geometry.

All sensor functions are pure given (pose, rng) and a loaded world, so
they can be called safely from per-robot contexts. Clouds are returned in
the sensor frame; the pose that produced them travels alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .world import World


@dataclass
class PointCloud:
    points: np.ndarray          # (N,3) sensor frame
    intensity: np.ndarray       # (N,)
    stamp: float = 0.0
    frame: str = "sensor"

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=float).reshape(-1)
        if len(self.points) != len(self.intensity):
            raise ValueError("points/intensity length mismatch")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, stamp: float = 0.0, frame: str = "sensor") -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), stamp, frame)


@dataclass
class LidarModel:
    rings: int = 16
    azimuths: int = 360
    max_range: float = 50.0
    vfov_deg: float = 90.0
    surface_intensity: tuple[float, float] = (40.0, 200.0)

    _dirs: np.ndarray | None = field(default=None, repr=False, compare=False)

    def ray_directions(self) -> np.ndarray:
        """Unit directions in the sensor frame, (rings*azimuths, 3)."""
        if self._dirs is None:
            el = np.deg2rad(np.linspace(-self.vfov_deg / 2.0, self.vfov_deg / 2.0,
                                        self.rings))
            az = np.linspace(0.0, 2.0 * math.pi, self.azimuths, endpoint=False)
            ce, se = np.cos(el), np.sin(el)
            ca, sa = np.cos(az), np.sin(az)
            dirs = np.stack([
                np.outer(ce, ca).ravel(),
                np.outer(ce, sa).ravel(),
                np.repeat(se, self.azimuths),
            ], axis=1)
            self._dirs = dirs
        return self._dirs


@dataclass
class DepthCameraModel:
    width: int = 32
    height: int = 24
    fov_deg: float = 60.0
    max_range: float = 8.0
    # mount: camera frame in body frame (default looks straight down:
    # camera z = -body z, camera x = body x, camera y = -body y)
    mount_rotation: np.ndarray = field(default_factory=lambda: np.diag([1.0, -1.0, -1.0]))
    mount_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def pixel_directions(self) -> np.ndarray:
        """Unit ray directions in the camera frame (z forward), (H*W, 3)."""
        f = (self.width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)
        us = np.arange(self.width) + 0.5 - self.width / 2.0
        vs = np.arange(self.height) + 0.5 - self.height / 2.0
        uu, vv = np.meshgrid(us, vs)
        d = np.stack([uu.ravel() / f, vv.ravel() / f, np.ones(self.width * self.height)],
                     axis=1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class RgbCameraModel:
    fu: float = 320.0
    fv: float = 320.0
    u0: float = 160.0
    v0: float = 120.0
    width: int = 320
    height: int = 240
    distortion: tuple[float, float, float, float, float] = (0.0,) * 5
    max_range: float = 12.0
    # camera z forward along body x by default (front-facing camera):
    # columns are camera x=-body y, camera y=-body z, camera z=+body x
    mount_rotation: np.ndarray = field(default_factory=lambda: np.array(
        [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]))
    mount_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        if self.fu <= 0 or self.fv <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.u0 <= self.width and 0 <= self.v0 <= self.height):
            raise ValueError("principal point outside image")

    def camera_pose(self, body: Pose) -> Pose:
        return body.compose(Pose(self.mount_translation, self.mount_rotation))

    def project(self, pts_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Camera-frame points -> undistorted pixels. Returns (uv (N,2), in_front)."""
        pts = np.atleast_2d(np.asarray(pts_cam, dtype=float))
        z = pts[:, 2]
        in_front = z > 1e-9
        zz = np.where(in_front, z, 1.0)
        u = self.fu * pts[:, 0] / zz + self.u0
        v = self.fv * pts[:, 1] / zz + self.v0
        return np.stack([u, v], axis=1), in_front

    def unproject(self, uv: np.ndarray) -> np.ndarray:
        """Undistorted pixels -> unit rays in the camera frame."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        d = np.stack([(uv[:, 0] - self.u0) / self.fu,
                      (uv[:, 1] - self.v0) / self.fv,
                      np.ones(len(uv))], axis=1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return ((uv[:, 0] >= 0) & (uv[:, 0] <= self.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= self.height))


def lidar_scan(pose: Pose, model: LidarModel, world: World,
               rng: np.random.Generator,
               active_fog: tuple[int, ...] = ()) -> PointCloud:
    """One spinning-lidar sweep from ``pose``.

    Wall returns carry intensities from the surface distribution. When the
    sensor sits inside a dust zone, extra low-intensity points are injected
    uniformly within the zone; a triggered fog cloud enveloping the sensor
    injects uniform in-cloud points with surface-like intensity (fog is not
    separable by the intensity filter, matching its role as a hard blocker).
    """
    dirs_world = model.ray_directions() @ pose.rotation.T
    hit, pts = world.raycast(pose.position, dirs_world, model.max_range)
    pts_sensor = (pts[hit] - pose.position) @ pose.rotation
    lo, hi = model.surface_intensity
    intens = rng.uniform(lo, hi, size=int(hit.sum()))

    extra_pts = []
    extra_int = []
    n_rays = len(dirs_world)
    for zone in world.dust_zones:
        if not zone.box.contains(tuple(pose.position)):
            continue
        count = int(rng.binomial(n_rays, min(1.0, zone.density)))
        if count == 0:
            continue
        lo_z = np.asarray(zone.box.lo)
        hi_z = np.asarray(zone.box.hi)
        p = rng.uniform(lo_z, hi_z, size=(count, 3))
        extra_pts.append((p - pose.position) @ pose.rotation)
        extra_int.append(rng.uniform(zone.intensity_min, zone.intensity_max, size=count))
    for emitter in world.fog_emitters:
        if emitter.uid not in active_fog:
            continue
        center = np.asarray(emitter.center)
        if np.linalg.norm(pose.position - center) > emitter.radius:
            continue
        count = n_rays // 2
        # uniform in the fog ball
        u = rng.normal(size=(count, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = emitter.radius * rng.uniform(0.0, 1.0, size=count) ** (1.0 / 3.0)
        p = center + u * r[:, None]
        extra_pts.append((p - pose.position) @ pose.rotation)
        extra_int.append(rng.uniform(lo, hi, size=count))

    if extra_pts:
        pts_sensor = np.vstack([pts_sensor, *extra_pts])
        intens = np.concatenate([intens, *extra_int])
    return PointCloud(pts_sensor, intens, stamp=pose.stamp, frame="lidar")


def depth_frame(pose: Pose, model: DepthCameraModel, world: World) -> PointCloud:
    """Depth camera frame as a cloud in the camera frame (z forward)."""
    cam = pose.compose(Pose(model.mount_translation, model.mount_rotation))
    dirs_world = model.pixel_directions() @ cam.rotation.T
    hit, pts = world.raycast(cam.position, dirs_world, model.max_range)
    pts_cam = (pts[hit] - cam.position) @ cam.rotation
    return PointCloud(pts_cam, np.zeros(int(hit.sum())), stamp=pose.stamp, frame="depth")


def visible_artifacts(pose: Pose, model: RgbCameraModel, world: World,
                      occlusion_rays: int = 100
                      ) -> list[tuple[int, np.ndarray, float]]:
    """Artifacts in this camera's view.

    Returns (artifact uid, bounding box corners c1..c4 as a (4,2) array,
    occlusion fraction). The box is the projected axis-aligned extent of
    the artifact's voxel footprint clipped to the image; occlusion is the
    fraction of sample rays blocked by ground-truth occupancy.
    """
    cam = model.camera_pose(pose)
    out = []
    for art in world.artifacts:
        center = np.asarray(art.position)
        rel = cam.inverse_transform(center)[0]
        if rel[2] <= 0.0 or np.linalg.norm(rel) > model.max_range:
            continue
        h = art.size / 2.0
        corners = center + np.array(
            [[sx * h, sy * h, sz * h] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        uv, front = model.project(cam.inverse_transform(corners))
        if not np.all(front):
            continue
        u0c, v0c = uv[:, 0].min(), uv[:, 1].min()
        u1c, v1c = uv[:, 0].max(), uv[:, 1].max()
        # clip to image
        u0c, u1c = max(u0c, 0.0), min(u1c, float(model.width))
        v0c, v1c = max(v0c, 0.0), min(v1c, float(model.height))
        if u1c - u0c < 1.0 or v1c - v0c < 1.0:
            continue
        # deterministic sample grid inside the artifact box for occlusion
        side = max(2, int(round(occlusion_rays ** (1.0 / 3.0))))
        axes = np.linspace(-h * 0.9, h * 0.9, side)
        gx, gy, gz = np.meshgrid(axes, axes, axes)
        samples = center + np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        blocked = world.segment_blocked(cam.position, samples)
        occlusion = float(np.mean(blocked))
        if occlusion >= 0.999:
            continue
        box = np.array([[u0c, v0c], [u1c, v0c], [u1c, v1c], [u0c, v1c]])
        out.append((art.uid, box, occlusion))
    return out
