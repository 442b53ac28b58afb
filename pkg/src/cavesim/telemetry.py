"""Live telemetry endpoint: streams JSON frames (one object per line) over
a persistent HTTP response and accepts operator-command frames by POST.

The simulation stays single-threaded; the server thread only reads
snapshots from a queue and pushes commands into the runner's inbox, which
the loop drains at the next tick. Injected commands travel through the
simulated comms layer, so commands to disconnected robots are lost there.

Frame schema (versioned, see docs/telemetry.md):
  {"type": "header", "version": 1, "scenario": ..., "robots": [...], ...}
  {"type": "snapshot", "t": ..., "robots": [...], "hypotheses": [...],
   "events": [...], "map": [[x, y], ...], "ltv": {...}}
  {"type": "error", "detail": ...}
"""

from __future__ import annotations

import json
import queue
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .comms import CmdKind, OperatorCommand
from .harness import SimRunner

SCHEMA_VERSION = 1
_SNAPSHOT_PERIOD = 0.1          # 10 Hz toward the console


def _round3(x) -> list:
    return [round(float(v), 3) for v in np.asarray(x).ravel()]


class TelemetryHub:
    """Fans runner snapshots out to connected stream clients."""

    def __init__(self, runner: SimRunner):
        self.runner = runner
        self.clients: list[queue.Queue] = []
        self._lock = threading.Lock()
        self._last_snapshot = -1e9
        self._event_cursor = 0
        self._next_cid = 1
        runner.snapshot_hook = self._on_tick

    def header_frame(self) -> dict:
        scn = self.runner.scn
        w = self.runner.world
        return {
            "type": "header", "version": SCHEMA_VERSION,
            "scenario": scn.name, "seed": scn.seed, "tick": scn.tick,
            "voxel": w.voxel,
            "bounds": [_round3(w.bounds.lo), _round3(w.bounds.hi)],
            "home": _round3(w.home),
            "robots": [r.name for r in self.runner.robots],
            "commands": [k.name for k in CmdKind],
        }

    def _snapshot(self) -> dict:
        r = self.runner
        events = r.events[self._event_cursor:]
        self._event_cursor = len(r.events)
        robots = []
        for rb in r.robots:
            goal = None
            if rb.current_goal is not None:
                goal = _round3(rb.current_goal)
            robots.append({
                "name": rb.name, "index": rb.index,
                "position": _round3(rb.position),
                "heading": round(float(rb.heading), 3),
                "state": rb.mission.state.value,
                "battery": round(rb.battery_remaining, 1),
                "in_fog": rb.in_fog,
                "goal": goal,
            })
        hyps = []
        for (robot_id, hid) in sorted(r.base_hypotheses):
            h = r.base_hypotheses[(robot_id, hid)]
            hyps.append({
                "robot": robot_id, "hid": hid,
                "position": _round3(h.position),
                "class": h.best_class(),
                "n_detections": h.n_detections,
                "confidence": round(h.mean_confidence, 3),
            })
        occ = []
        ltv_boxes = {}
        for rb in r.robots:
            pts = rb.densemap.occupied_centers()
            if len(pts):
                occ.append(np.unique(np.round(pts[:, :2] * 2.0) / 2.0, axis=0))
            for rid in sorted(rb.received_maps):
                m = rb.received_maps[rid]
                ltv_boxes.setdefault(str(rid), [
                    {"center": _round3(s.center), "yaw": round(s.yaw, 3),
                     "extents": _round3(s.extents),
                     "coverage": round(s.coverage, 3)}
                    for s in m.segments])
        occ_pts = (np.unique(np.vstack(occ), axis=0).tolist() if occ else [])
        frontiers = []
        for rb in r.robots:
            for m in rb.received_maps.values():
                for fr in m.frontiers:
                    frontiers.append({
                        "position": _round3(fr.position),
                        "likelihood": round(fr.visited_likelihood, 3),
                    })
        return {
            "type": "snapshot", "t": round(r.t, 3), "robots": robots,
            "hypotheses": hyps, "events": events, "map": occ_pts,
            "ltv": ltv_boxes, "frontiers": frontiers,
            "reports": len(r.arbiter.ledger.reports),
        }

    def _on_tick(self, runner: SimRunner) -> None:
        if runner.t - self._last_snapshot < _SNAPSHOT_PERIOD:
            return
        self._last_snapshot = runner.t
        frame = self._snapshot()
        with self._lock:
            dead = []
            for q in self.clients:
                try:
                    q.put_nowait(frame)
                except queue.Full:
                    dead.append(q)
            for q in dead:
                self.clients.remove(q)

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=256)
        q.put(self.header_frame())
        with self._lock:
            self.clients.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self.clients:
                self.clients.remove(q)

    def inject(self, payload: dict) -> dict:
        """Validate and queue an operator command frame."""
        try:
            robot = int(payload["robot"])
            kind = CmdKind[str(payload["command"]).upper()]
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed command frame: {exc}") from None
        pos = None
        if "position" in payload and payload["position"] is not None:
            p = payload["position"]
            if not isinstance(p, (list, tuple)) or len(p) != 3:
                raise ValueError("position must be [x, y, z]")
            pos = tuple(float(v) for v in p)
        if kind in (CmdKind.EXPLORE_TO, CmdKind.PLAN_TO, CmdKind.SET_RETURN) \
                and pos is None:
            raise ValueError(f"{kind.name} requires a position")
        cid = self._next_cid
        self._next_cid += 1
        cmd = OperatorCommand(cid, kind, robot, pos)
        self.runner.inject_command(cmd)
        return {"type": "ack", "cid": cid, "queued": True}


class _Handler(BaseHTTPRequestHandler):
    hub: TelemetryHub = None   # set by serve()

    def log_message(self, *args) -> None:     # quiet the default stderr spam
        pass

    def do_GET(self) -> None:
        if self.path.rstrip("/") not in ("", "/stream"):
            self.send_error(404)
            return
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Cache-Control", "no-store")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        q = self.hub.subscribe()
        try:
            while True:
                frame = q.get()
                if frame is None:
                    break
                line = (json.dumps(frame, sort_keys=True) + "\n").encode()
                self.wfile.write(line)
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            self.hub.unsubscribe(q)

    def do_POST(self) -> None:
        if self.path.rstrip("/") != "/command":
            self.send_error(404)
            return
        try:
            n = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(n).decode())
            reply = self.hub.inject(payload)
            code = 200
        except (ValueError, json.JSONDecodeError) as exc:
            reply = {"type": "error", "detail": str(exc)}
            code = 400
        body = json.dumps(reply).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_OPTIONS(self) -> None:
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()


def serve(runner: SimRunner, port: int) -> tuple[ThreadingHTTPServer, TelemetryHub]:
    """Start the telemetry server on a daemon thread; returns (server, hub)."""
    hub = TelemetryHub(runner)
    handler = type("BoundHandler", (_Handler,), {"hub": hub})
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, hub
