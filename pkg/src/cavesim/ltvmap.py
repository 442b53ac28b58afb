"""Compact topological-volumetric map for low-bandwidth sharing.

Segments become 4-DOF bounding boxes (center, yaw about vertical,
extents) with a coverage fraction and adjacency; frontier viewpoints ride
along with an information value and a visited likelihood. The binary wire
format (version 1, little-endian, centimeter fixed point) is documented in
docs/wire-formats.md and budgeted at 64 bytes per segment and 32 bytes per
frontier.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .facetmap import FacetMap
from .spheremap import SphereMap

_MAGIC = 0x4C
_VERSION = 1


class LtvDecodeError(ValueError):
    pass


def _q(value: float, scale: float) -> float:
    """Quantize to the wire grid so encode/decode round-trips exactly."""
    return round(value * scale) / scale


@dataclass(frozen=True)
class LtvSegment:
    sid: int
    center: tuple[float, float, float]
    yaw: float
    extents: tuple[float, float, float]    # half-extents, meters
    coverage: float
    adjacency: tuple[int, ...]

    def membership(self, points: np.ndarray) -> np.ndarray:
        """Per-point likelihood of lying inside this box: 0 outside, rising
        linearly to 1 at the box center (in the yaw-aligned frame)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts - np.asarray(self.center)
        c, s = math.cos(-self.yaw), math.sin(-self.yaw)
        x = c * rel[:, 0] - s * rel[:, 1]
        y = s * rel[:, 0] + c * rel[:, 1]
        z = rel[:, 2]
        h = np.maximum(np.asarray(self.extents), 1e-9)
        ratio = np.max(np.abs(np.stack([x, y, z], axis=1)) / h, axis=1)
        return np.clip(1.0 - ratio, 0.0, 1.0)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.membership(points) > 0.0


@dataclass(frozen=True)
class LtvFrontier:
    position: tuple[float, float, float]
    heading: float
    info: float
    segment: int
    visited_likelihood: float = 0.0


@dataclass(frozen=True)
class LtvMap:
    robot: int
    stamp: float
    segments: tuple[LtvSegment, ...]
    frontiers: tuple[LtvFrontier, ...]

    def segment_by_id(self, sid: int) -> LtvSegment | None:
        for seg in self.segments:
            if seg.sid == sid:
                return seg
        return None


# -- extraction ---------------------------------------------------------------


def extract(smap: SphereMap, fmap: FacetMap | None,
            frontiers: list[tuple[np.ndarray, float, float]] | None = None,
            robot: int = 0, stamp: float = 0.0) -> LtvMap:
    """Build the compact map from the sphere graph and surface coverage.

    ``frontiers`` is a list of (position, heading, info value); each is
    attached to the segment whose spheres contain it (nearest sphere
    otherwise). Box yaw comes from the horizontal principal axis of the
    segment's sphere centers; extents cover every sphere including radius.
    """
    segments = []
    adjacency: dict[int, set[int]] = {sid: set() for sid in smap.segments}
    for (sa, sb) in smap.portals:
        adjacency[sa].add(sb)
        adjacency[sb].add(sa)

    for sid in sorted(smap.segments.keys()):
        members = smap.segments[sid]
        centers = np.array([smap.centers[m] for m in members], dtype=float)
        radii = np.array([smap.radii[m] for m in members], dtype=float)
        xy = centers[:, :2]
        if len(members) > 1:
            cov = np.cov((xy - xy.mean(axis=0)).T)
            evals, evecs = np.linalg.eigh(cov)
            axis = evecs[:, int(np.argmax(evals))]
            yaw = math.atan2(axis[1], axis[0])
            if yaw <= -math.pi / 2.0:
                yaw += math.pi
            elif yaw > math.pi / 2.0:
                yaw -= math.pi
        else:
            yaw = 0.0
        c, s = math.cos(-yaw), math.sin(-yaw)
        x = c * (centers[:, 0] - xy[:, 0].mean()) - s * (centers[:, 1] - xy[:, 1].mean())
        y = s * (centers[:, 0] - xy[:, 0].mean()) + c * (centers[:, 1] - xy[:, 1].mean())
        z = centers[:, 2] - centers[:, 2].mean()
        half = np.array([
            float(np.max(np.abs(x) + radii)),
            float(np.max(np.abs(y) + radii)),
            float(np.max(np.abs(z) + radii)),
        ])
        mid = np.array([xy[:, 0].mean(), xy[:, 1].mean(), centers[:, 2].mean()])

        seg = LtvSegment(
            sid=sid,
            center=tuple(_q(v, 100.0) for v in mid),
            yaw=_q(yaw, 10000.0),
            extents=tuple(max(0.01, _q(v, 100.0)) for v in half),
            coverage=0.0,
            adjacency=tuple(sorted(adjacency.get(sid, set()))),
        )
        if fmap is not None:
            ratio = fmap.coverage_ratio(member_fn=seg.contains)
            seg = replace(seg, coverage=_q(ratio, 10000.0))
        segments.append(seg)

    out_frontiers = []
    for (pos, heading, info) in (frontiers or []):
        pos = np.asarray(pos, dtype=float)
        seg_id = _owning_segment(smap, pos)
        if seg_id is None:
            continue
        out_frontiers.append(LtvFrontier(
            position=tuple(_q(v, 100.0) for v in pos),
            heading=_q(float(heading), 10000.0),
            info=float(np.float32(info)),
            segment=seg_id,
            visited_likelihood=0.0,
        ))
    return LtvMap(robot, stamp, tuple(segments), tuple(out_frontiers))


def _owning_segment(smap: SphereMap, pos: np.ndarray) -> int | None:
    inside = smap.containing_spheres(pos)
    if inside:
        return smap.segment_of[inside[0]]
    best, best_gap = None, math.inf
    for i in smap.sphere_ids():
        gap = float(np.linalg.norm(pos - smap.centers[i])) - smap.radii[i]
        if gap < best_gap:
            best, best_gap = i, gap
    if best is None or best_gap > 2.0:
        return None
    return smap.segment_of[best]


# -- wire format ----------------------------------------------------------------


def _pack_i32cm(v: float) -> int:
    return int(round(v * 100.0))


def serialize(m: LtvMap) -> bytes:
    out = bytearray()
    out += struct.pack("<BBBxdHH", _MAGIC, _VERSION, m.robot & 0xFF, m.stamp,
                       len(m.segments), len(m.frontiers))
    for seg in m.segments:
        out += struct.pack("<H", seg.sid & 0xFFFF)
        out += struct.pack("<iii", *(_pack_i32cm(v) for v in seg.center))
        out += struct.pack("<h", int(round(seg.yaw * 10000.0)))
        out += struct.pack("<HHH", *(min(0xFFFF, _pack_i32cm(v)) for v in seg.extents))
        out += struct.pack("<H", int(round(seg.coverage * 10000.0)))
        out += struct.pack("<B", len(seg.adjacency))
        for a in seg.adjacency:
            out += struct.pack("<H", a & 0xFFFF)
    for fr in m.frontiers:
        out += struct.pack("<iii", *(_pack_i32cm(v) for v in fr.position))
        out += struct.pack("<h", int(round(fr.heading * 10000.0)))
        out += struct.pack("<f", fr.info)
        out += struct.pack("<H", fr.segment & 0xFFFF)
        out += struct.pack("<H", int(round(fr.visited_likelihood * 10000.0)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise LtvDecodeError(
                f"truncated payload at byte {self.pos} (need {size} more)")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals


def deserialize(data: bytes) -> LtvMap:
    r = _Reader(data)
    magic, version, robot, stamp, n_seg, n_fr = r.take("<BBBxdHH")
    if magic != _MAGIC:
        raise LtvDecodeError(f"bad magic byte 0x{magic:02X}")
    if version != _VERSION:
        raise LtvDecodeError(f"unsupported version {version}")
    segments = []
    for _ in range(n_seg):
        (sid,) = r.take("<H")
        cx, cy, cz = r.take("<iii")
        (yaw_q,) = r.take("<h")
        ex, ey, ez = r.take("<HHH")
        (cov_q,) = r.take("<H")
        (n_adj,) = r.take("<B")
        adj = tuple(r.take("<H")[0] for _ in range(n_adj))
        segments.append(LtvSegment(
            sid=sid, center=(cx / 100.0, cy / 100.0, cz / 100.0),
            yaw=yaw_q / 10000.0,
            extents=(ex / 100.0, ey / 100.0, ez / 100.0),
            coverage=cov_q / 10000.0, adjacency=adj))
    frontiers = []
    for _ in range(n_fr):
        px, py, pz = r.take("<iii")
        (h_q,) = r.take("<h")
        (info,) = r.take("<f")
        (seg,) = r.take("<H")
        (l_q,) = r.take("<H")
        frontiers.append(LtvFrontier(
            position=(px / 100.0, py / 100.0, pz / 100.0),
            heading=h_q / 10000.0, info=info, segment=seg,
            visited_likelihood=l_q / 10000.0))
    if r.pos != len(data):
        raise LtvDecodeError(f"{len(data) - r.pos} trailing bytes")
    return LtvMap(robot, stamp, tuple(segments), tuple(frontiers))


# -- cooperative likelihoods -----------------------------------------------------


def membership_likelihood(point: np.ndarray, m: LtvMap) -> float:
    """Highest per-segment membership of a point in this map's boxes."""
    if not m.segments:
        return 0.0
    pts = np.asarray(point, dtype=float)[None, :]
    return float(max(seg.membership(pts)[0] for seg in m.segments))


def co_update(maps: list[LtvMap]) -> list[LtvMap]:
    """Cross-map frontier visited-likelihood update.

    Every frontier's likelihood becomes the maximum membership over all
    segments of the OTHER maps (never decreasing: knowledge accumulates).
    Returns new map objects in input order.
    """
    out = []
    for i, m in enumerate(maps):
        others = [o for j, o in enumerate(maps) if j != i]
        new_frontiers = []
        for fr in m.frontiers:
            likelihood = fr.visited_likelihood
            for o in others:
                likelihood = max(likelihood, membership_likelihood(
                    np.asarray(fr.position), o))
            new_frontiers.append(replace(fr, visited_likelihood=_q(likelihood, 10000.0)))
        out.append(replace(m, frontiers=tuple(new_frontiers)))
    return out


def is_blocked(fr: LtvFrontier, eps: float = 1e-3) -> bool:
    return fr.visited_likelihood >= 1.0 - eps
