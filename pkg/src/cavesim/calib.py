"""Camera-to-lidar extrinsic calibration from checkerboard corner
correspondences: linear PnP initialization plus Levenberg-Marquardt
reprojection refinement.

Corner detection in both modalities is synthesized at desk scale: the
generator projects known board poses through the true extrinsics and adds
pixel noise; the solver never sees the truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .geometry import orthonormalize


class DegenerateGeometryError(ValueError):
    """Board poses span too little volume to constrain the extrinsics."""


@dataclass
class CalibPair:
    """One retained frame pair: four 3D board corners in the lidar frame
    and their four pixel coordinates in the image."""

    lidar_corners: np.ndarray       # (4,3)
    image_corners: np.ndarray       # (4,2)

    def __post_init__(self) -> None:
        self.lidar_corners = np.asarray(self.lidar_corners, dtype=float).reshape(4, 3)
        self.image_corners = np.asarray(self.image_corners, dtype=float).reshape(4, 2)


@dataclass
class CalibResult:
    rotation: np.ndarray            # camera orientation in the lidar frame
    translation: np.ndarray         # camera origin in the lidar frame
    rmse_px: float
    init_rmse_px: float


def _project(k: np.ndarray, pts_cam: np.ndarray) -> np.ndarray:
    uvw = pts_cam @ k.T
    return uvw[:, :2] / uvw[:, 2:3]


def _reproject_all(params: np.ndarray, pts_lidar: np.ndarray, k: np.ndarray
                   ) -> np.ndarray:
    r = _rodrigues(params[:3])
    t = params[3:]
    # world (lidar) point into camera frame: camera pose is (r, t) in lidar
    pts_cam = (pts_lidar - t) @ r
    return _project(k, pts_cam)


def _rodrigues(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3)
    a = w / theta
    skew = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return (np.eye(3) + math.sin(theta) * skew
            + (1.0 - math.cos(theta)) * (skew @ skew))


def _rodrigues_inv(r: np.ndarray) -> np.ndarray:
    cos_t = (np.trace(r) - 1.0) / 2.0
    cos_t = min(1.0, max(-1.0, cos_t))
    theta = math.acos(cos_t)
    if theta < 1e-12:
        return np.zeros(3)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    axis = axis / (2.0 * math.sin(theta))
    return axis * theta


def _linear_pnp(pts_lidar: np.ndarray, pixels: np.ndarray, k: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray]:
    """DLT estimate of the lidar-to-camera transform from >= 6 points.

    Solves cross(x_norm, R_cl X + t_cl) = 0 for the 12 entries, projects R
    onto SO(3), and fixes the scale/sign from positive depths.
    """
    rays = (np.linalg.inv(k) @ np.column_stack(
        [pixels, np.ones(len(pixels))]).T).T
    n = len(pts_lidar)
    a = np.zeros((2 * n, 12))
    for i in range(n):
        x, y = rays[i, 0] / rays[i, 2], rays[i, 1] / rays[i, 2]
        px = pts_lidar[i]
        # rows for u and v of the normalized projection
        a[2 * i, 0:3] = px
        a[2 * i, 3] = 1.0
        a[2 * i, 8:11] = -x * px
        a[2 * i, 11] = -x
        a[2 * i + 1, 4:7] = px
        a[2 * i + 1, 7] = 1.0
        a[2 * i + 1, 8:11] = -y * px
        a[2 * i + 1, 11] = -y
    _, _, vt = np.linalg.svd(a)
    sol = vt[-1]
    m = sol.reshape(3, 4)
    r_raw, t_raw = m[:, :3], m[:, 3]
    scale = np.linalg.norm(r_raw, axis=1).mean()
    if scale < 1e-12:
        raise DegenerateGeometryError("PnP system collapsed")
    r_cl = r_raw / scale
    t_cl = t_raw / scale
    # positive depth for the centroid decides the sign
    centroid = pts_lidar.mean(axis=0)
    if (r_cl @ centroid + t_cl)[2] < 0.0:
        r_cl, t_cl = -r_cl, -t_cl
    r_cl = orthonormalize(r_cl)
    return r_cl, t_cl


def synthesize_pairs(true_rotation: np.ndarray, true_translation: np.ndarray,
                     k: np.ndarray, n_poses: int, rng: np.random.Generator,
                     pixel_noise: float = 0.0,
                     board_size: float = 0.6) -> list[CalibPair]:
    """Generate checkerboard corner pairs seen by a camera with the given
    true extrinsics (camera pose in the lidar frame)."""
    half = board_size / 2.0
    corners_board = np.array([[-half, -half, 0.0], [half, -half, 0.0],
                              [half, half, 0.0], [-half, half, 0.0]])
    pairs = []
    attempts = 0
    while len(pairs) < n_poses and attempts < n_poses * 20:
        attempts += 1
        center = np.array([rng.uniform(-1.2, 1.2), rng.uniform(-0.8, 0.8),
                           rng.uniform(2.0, 5.0)])
        rot = _rodrigues(rng.uniform(-0.5, 0.5, size=3))
        pts_cam_true = corners_board @ rot.T + center
        if np.any(pts_cam_true[:, 2] < 0.3):
            continue
        pix = _project(k, pts_cam_true)
        if pixel_noise > 0.0:
            pix = pix + rng.normal(0.0, pixel_noise, size=pix.shape)
        pts_lidar = pts_cam_true @ true_rotation.T + true_translation
        pairs.append(CalibPair(pts_lidar, pix))
    return pairs


def calibrate(pairs: list[CalibPair], k: np.ndarray,
              min_span: float = 0.05) -> CalibResult:
    """Recover camera extrinsics in the lidar frame from corner pairs.

    Stacks all retained correspondences, initializes with linear PnP, and
    refines with Levenberg-Marquardt on the pixel reprojection error.
    Raises when fewer than 3 pairs are given or the 3D corners are close to
    a degenerate (flat / collapsed) configuration.
    """
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 correspondence pairs, got {len(pairs)}")
    pts = np.vstack([p.lidar_corners for p in pairs])
    pix = np.vstack([p.image_corners for p in pairs])
    centered = pts - pts.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[-1] < min_span * math.sqrt(len(pts)):
        raise DegenerateGeometryError(
            f"board poses span too little volume (sigma={svals[-1]:.4f})")

    r_cl, t_cl = _linear_pnp(pts, pix, k)
    # camera pose in the lidar frame is the inverse of the lidar->camera map
    r0 = r_cl.T
    t0 = -r_cl.T @ t_cl
    params0 = np.concatenate([_rodrigues_inv(r0), t0])

    def residual(params: np.ndarray) -> np.ndarray:
        return (_reproject_all(params, pts, k) - pix).ravel()

    init_rmse = float(np.sqrt(np.mean(residual(params0) ** 2)))
    sol = least_squares(residual, params0, method="lm", xtol=1e-15, ftol=1e-15,
                        gtol=1e-15, max_nfev=400)
    rmse = float(np.sqrt(np.mean(sol.fun ** 2)))
    if rmse > init_rmse:
        # refinement must never lose to its own initialization
        sol_x, rmse = params0, init_rmse
    else:
        sol_x = sol.x
    return CalibResult(_rodrigues(sol_x[:3]), sol_x[3:].copy(), rmse, init_rmse)


def rotation_error_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    dr = r1.T @ r2
    cos_t = (np.trace(dr) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos_t))))

