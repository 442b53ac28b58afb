"""Range-limited lossy mesh network and the framed binary message layer.

Connectivity is graph reachability over links no longer than the radio
range; messages route over the fewest hops, accumulate per-hop delay, and
are dropped whole with the configured probability. Loss is silent by
design. All payloads share one envelope: magic, type byte, u32 length,
payload (see docs/wire-formats.md).
"""

from __future__ import annotations

import heapq
import itertools
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .artifacts import ArtifactHypothesis
from .scenario import ARTIFACT_CLASSES, CLASS_NONE, CommsConfig

_ENVELOPE_MAGIC = 0xAB


class MsgType(IntEnum):
    LTVMAP = 1
    HYPOTHESIS = 2
    POSITION = 3
    OPERATOR_CMD = 4
    NODE_ANNOUNCE = 5
    CMD_ACK = 6


class EnvelopeError(ValueError):
    pass


def frame(msg_type: MsgType, payload: bytes) -> bytes:
    return struct.pack("<BBI", _ENVELOPE_MAGIC, int(msg_type), len(payload)) + payload


def unframe(data: bytes) -> tuple[MsgType, bytes]:
    if len(data) < 6:
        raise EnvelopeError("frame shorter than header")
    magic, mtype, length = struct.unpack_from("<BBI", data, 0)
    if magic != _ENVELOPE_MAGIC:
        raise EnvelopeError(f"bad envelope magic 0x{magic:02X}")
    if len(data) != 6 + length:
        raise EnvelopeError(f"length field {length} does not match frame size")
    return MsgType(mtype), data[6:]


# -- payload codecs ----------------------------------------------------------

_CLASS_IDS = {c: i for i, c in enumerate(list(ARTIFACT_CLASSES) + [CLASS_NONE])}
_CLASS_NAMES = {i: c for c, i in _CLASS_IDS.items()}


def encode_hypothesis(h: ArtifactHypothesis) -> bytes:
    """Robot id, position, P upper triangle, top-3 classes, detection count
    and representative-detection metadata."""
    out = bytearray()
    out += struct.pack("<BH", h.robot & 0xFF, h.hid & 0xFFFF)
    out += struct.pack("<ddd", *h.position)
    p = h.covariance
    out += struct.pack("<ffffff", p[0, 0], p[0, 1], p[0, 2], p[1, 1], p[1, 2], p[2, 2])
    top = sorted(h.class_probs.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
    while len(top) < 3:
        top.append((CLASS_NONE, 0.0))
    for cls, prob in top:
        out += struct.pack("<BH", _CLASS_IDS[cls], int(round(prob * 10000.0)))
    out += struct.pack("<Hf", h.n_detections & 0xFFFF, h.mean_confidence)
    rep = h.representative
    if rep is None:
        out += struct.pack("<BdHHHH", 0xFF, 0.0, 0, 0, 0, 0)
    else:
        out += struct.pack("<BdHHHH", rep.camera & 0xFF, rep.stamp,
                           int(rep.corners[:, 0].min()), int(rep.corners[:, 1].min()),
                           int(rep.width), int(rep.height))
    return bytes(out)


@dataclass
class HypothesisMsg:
    robot: int
    hid: int
    position: np.ndarray
    covariance: np.ndarray
    top_classes: list[tuple[str, float]]
    n_detections: int
    mean_confidence: float
    camera: int
    stamp: float
    bbox: tuple[int, int, int, int]

    def best_class(self) -> str:
        return self.top_classes[0][0]


def decode_hypothesis(data: bytes) -> HypothesisMsg:
    robot, hid = struct.unpack_from("<BH", data, 0)
    x, y, z = struct.unpack_from("<ddd", data, 3)
    p = struct.unpack_from("<ffffff", data, 27)
    cov = np.array([[p[0], p[1], p[2]], [p[1], p[3], p[4]], [p[2], p[4], p[5]]])
    off = 51
    classes = []
    for _ in range(3):
        cid, prob = struct.unpack_from("<BH", data, off)
        off += 3
        classes.append((_CLASS_NAMES[cid], prob / 10000.0))
    n_dets, conf = struct.unpack_from("<Hf", data, off)
    off += 6
    cam, stamp, bx, by, bw, bh = struct.unpack_from("<BdHHHH", data, off)
    return HypothesisMsg(robot, hid, np.array([x, y, z]), cov, classes,
                         n_dets, conf, cam, stamp, (bx, by, bw, bh))


def encode_position(robot: int, position: np.ndarray, state: str,
                    battery: float) -> bytes:
    s = state.encode()[:15]
    return struct.pack("<BffffB", robot & 0xFF, *position, battery, len(s)) + s


def decode_position(data: bytes) -> tuple[int, np.ndarray, str, float]:
    robot, x, y, z, battery, n = struct.unpack_from("<BffffB", data, 0)
    state = data[18:18 + n].decode()
    return robot, np.array([x, y, z]), state, battery


class CmdKind(IntEnum):
    EXPLORE_TO = 1
    PLAN_TO = 2
    SET_RETURN = 3
    STOP = 4
    LAND = 5
    RETURN_HOME = 6
    RESUME = 7


@dataclass(frozen=True)
class OperatorCommand:
    cid: int
    kind: CmdKind
    target_robot: int
    position: tuple[float, float, float] | None = None


def encode_command(cmd: OperatorCommand) -> bytes:
    has_pos = cmd.position is not None
    out = struct.pack("<IBBB", cmd.cid, int(cmd.kind), cmd.target_robot & 0xFF,
                      1 if has_pos else 0)
    if has_pos:
        out += struct.pack("<fff", *cmd.position)
    return out


def decode_command(data: bytes) -> OperatorCommand:
    cid, kind, robot, has_pos = struct.unpack_from("<IBBB", data, 0)
    pos = None
    if has_pos:
        pos = tuple(struct.unpack_from("<fff", data, 7))
    return OperatorCommand(cid, CmdKind(kind), robot, pos)


def encode_ack(cid: int, robot: int, accepted: bool, reason: str) -> bytes:
    s = reason.encode()[:63]
    return struct.pack("<IBBB", cid, robot & 0xFF, 1 if accepted else 0,
                       len(s)) + s


def decode_ack(data: bytes) -> tuple[int, int, bool, str]:
    cid, robot, ok, n = struct.unpack_from("<IBBB", data, 0)
    return cid, robot, bool(ok), data[7:7 + n].decode()


# -- network -----------------------------------------------------------------

BASE_ID = "base"


@dataclass
class Delivery:
    time: float
    dst: str
    msg_type: MsgType
    payload: bytes
    src: str


class CommsNetwork:
    """Event-queue simulation of the mesh network.

    Nodes are the base station, scenario breadcrumbs, and robots (positions
    updated as they fly). Send resolves connectivity at send time.
    """

    def __init__(self, cfg: CommsConfig, rng: np.random.Generator):
        self.cfg = cfg
        self._rng = rng
        self.positions: dict[str, np.ndarray] = {
            BASE_ID: np.asarray(cfg.base, dtype=float)}
        for i, bc in enumerate(cfg.breadcrumbs):
            self.positions[f"crumb{i}"] = np.asarray(bc, dtype=float)
        self._queue: list[tuple[float, int, Delivery]] = []
        self._counter = itertools.count()
        self.sent_messages = 0
        self.sent_bytes = 0
        self.dropped = 0

    def set_position(self, node: str, position: np.ndarray) -> None:
        self.positions[node] = np.asarray(position, dtype=float)

    def _hops(self, src: str, dst: str) -> int | None:
        """Fewest hops from src to dst over links within range (BFS)."""
        if src == dst:
            return 0
        rng2 = self.cfg.range ** 2
        nodes = sorted(self.positions)
        frontier = [src]
        seen = {src}
        hops = 0
        while frontier:
            hops += 1
            nxt = []
            for a in frontier:
                pa = self.positions[a]
                for b in nodes:
                    if b in seen:
                        continue
                    d2 = float(np.sum((pa - self.positions[b]) ** 2))
                    if d2 <= rng2:
                        if b == dst:
                            return hops
                        seen.add(b)
                        nxt.append(b)
            frontier = nxt
        return None

    def connected(self, src: str, dst: str = BASE_ID) -> bool:
        return self._hops(src, dst) is not None

    def send(self, now: float, src: str, dst: str | None, msg_type: MsgType,
             payload: bytes) -> list[str]:
        """Queue a message for dst (or broadcast). Returns reached node ids.

        Unreachable or dropped messages vanish silently; relaying is folded
        into connectivity (any multi-hop path delivers, with per-hop delay).
        """
        targets = [dst] if dst is not None else [n for n in sorted(self.positions)
                                                 if n != src]
        reached = []
        for target in targets:
            hops = self._hops(src, target)
            self.sent_messages += 1
            self.sent_bytes += len(payload) + 6
            if hops is None:
                self.dropped += 1
                continue
            if self._rng.uniform() < self.cfg.drop:
                self.dropped += 1
                continue
            delay = sum(float(self._rng.uniform(*self.cfg.delay))
                        for _ in range(max(hops, 1)))
            d = Delivery(now + delay, target, msg_type, payload, src)
            heapq.heappush(self._queue, (d.time, next(self._counter), d))
            reached.append(target)
        return reached

    def poll(self, now: float) -> list[Delivery]:
        """Deliveries due by ``now``, in delivery-time order."""
        out = []
        while self._queue and self._queue[0][0] <= now:
            out.append(heapq.heappop(self._queue)[2])
        return out

