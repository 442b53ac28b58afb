"""Run metrics: accounting of motion, artifacts, mapping error, coverage,
and comms usage, serializable deterministically."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class RobotMetrics:
    name: str
    traveled: float = 0.0
    active_time: float = 0.0
    ltv_bytes_sent: int = 0
    final_state: str = ""

    @property
    def avg_velocity(self) -> float:
        return self.traveled / self.active_time if self.active_time > 0 else 0.0


@dataclass
class RunMetrics:
    robots: dict[str, RobotMetrics] = field(default_factory=dict)
    artifacts_total: int = 0
    artifacts_seen: int = 0
    artifacts_detected: int = 0
    artifacts_confirmed: int = 0
    artifacts_reported: int = 0
    artifacts_scored: int = 0
    mapping_error_hist: list[int] = field(default_factory=list)
    mapping_error_edges: list[float] = field(default_factory=list)
    coverage_timeline: list[tuple[float, float]] = field(default_factory=list)
    messages_sent: int = 0
    messages_dropped: int = 0
    bytes_sent: int = 0
    reports: list[dict] = field(default_factory=list)
    duration: float = 0.0

    def validate(self) -> None:
        if not (self.artifacts_scored <= self.artifacts_reported
                <= max(self.artifacts_confirmed, self.artifacts_reported)):
            raise ValueError("artifact funnel accounting out of order")

    def to_dict(self) -> dict:
        return {
            "duration": round(self.duration, 6),
            "robots": {
                name: {
                    "traveled": round(r.traveled, 4),
                    "active_time": round(r.active_time, 4),
                    "avg_velocity": round(r.avg_velocity, 4),
                    "ltv_bytes_sent": r.ltv_bytes_sent,
                    "final_state": r.final_state,
                } for name, r in sorted(self.robots.items())
            },
            "artifacts": {
                "total": self.artifacts_total,
                "seen": self.artifacts_seen,
                "detected": self.artifacts_detected,
                "confirmed": self.artifacts_confirmed,
                "reported": self.artifacts_reported,
                "scored": self.artifacts_scored,
            },
            "mapping_error": {
                "edges": [round(e, 4) for e in self.mapping_error_edges],
                "counts": self.mapping_error_hist,
            },
            "coverage_timeline": [[round(t, 3), round(c, 5)]
                                  for t, c in self.coverage_timeline],
            "comms": {
                "messages_sent": self.messages_sent,
                "messages_dropped": self.messages_dropped,
                "bytes_sent": self.bytes_sent,
            },
            "reports": self.reports,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def mapping_error_histogram(map_points: np.ndarray, truth_points: np.ndarray,
                            max_err: float = 1.0, bins: int = 10
                            ) -> tuple[list[int], list[float]]:
    """Distances from built-map occupied centers to the nearest ground-truth
    occupied center, binned up to ``max_err``."""
    edges = list(np.linspace(0.0, max_err, bins + 1))
    if len(map_points) == 0 or len(truth_points) == 0:
        return [0] * bins, edges
    tree = cKDTree(truth_points)
    d, _ = tree.query(map_points)
    counts, _ = np.histogram(np.minimum(d, max_err - 1e-9), bins=np.asarray(edges))
    return [int(c) for c in counts], edges
