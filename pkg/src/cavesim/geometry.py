"""Shared geometric primitives: poses, rotations, axis-aligned boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) (closest in Frobenius norm)."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        u[:, -1] *= -1.0
        out = u @ vt
    return out


@dataclass
class Pose:
    """Rigid body pose: position, proper rotation, timestamp.

    The heading is the angle between the first world axis and the body
    forward axis projected onto the horizontal world plane.
    """

    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    stamp: float = 0.0

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)

    @classmethod
    def from_xyz_heading(cls, x: float, y: float, z: float, heading: float = 0.0,
                         stamp: float = 0.0) -> "Pose":
        return cls(np.array([x, y, z], dtype=float), rot_z(heading), stamp)

    @property
    def heading(self) -> float:
        fwd = self.rotation[:, 0]
        return math.atan2(fwd[1], fwd[0])

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Body-frame points (N,3) to world frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.rotation.T + self.position

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """World-frame points (N,3) to body frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.position) @ self.rotation

    def compose(self, other: "Pose") -> "Pose":
        """self * other (other expressed in self's frame)."""
        return Pose(self.position + self.rotation @ other.position,
                    self.rotation @ other.rotation, self.stamp)

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.rotation.copy(), self.stamp)


@dataclass(frozen=True)
class Aabb:
    """Closed axis-aligned box [lo, hi]."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self) -> None:
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"inverted box {self.lo} .. {self.hi}")

    @classmethod
    def of(cls, x0, y0, z0, x1, y1, z1) -> "Aabb":
        return cls((min(x0, x1), min(y0, y1), min(z0, z1)),
                   (max(x0, x1), max(y0, y1), max(z0, z1)))

    def contains(self, p) -> bool:
        return all(self.lo[i] <= p[i] <= self.hi[i] for i in range(3))

    def contains_many(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def center(self) -> np.ndarray:
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2.0

    def extents(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def inflate(self, margin: float) -> "Aabb":
        return Aabb(tuple(v - margin for v in self.lo), tuple(v + margin for v in self.hi))

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(tuple(min(a, b) for a, b in zip(self.lo, other.lo)),
                    tuple(max(a, b) for a, b in zip(self.hi, other.hi)))

    def intersects(self, other: "Aabb") -> bool:
        return all(self.lo[i] <= other.hi[i] and other.lo[i] <= self.hi[i] for i in range(3))

    def volume(self) -> float:
        e = self.extents()
        return float(e[0] * e[1] * e[2])


def unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("zero vector has no direction")
    return np.asarray(v, dtype=float) / n
