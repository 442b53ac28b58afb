"""State estimation: simulated localization (drift + delay) and the
delay-compensating filter with state/correction history buffers.

The filter is a linear Kalman filter over a per-axis point-mass model
(position, velocity, acceleration). Delayed position corrections are fused
at their acquisition time by rewinding to the buffered state just before
the correction, applying it there, and re-propagating every newer
correction in acquisition order. Replay performs the exact same floating
point operations an in-order filter would, so the final state matches an
in-order oracle bit-for-bit regardless of delivery order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, rot_z, wrap_angle


class StaleMeasurementError(ValueError):
    """Correction older than the history window cannot be fused."""


@dataclass
class StateEstimate:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    heading: float
    heading_rate: float
    stamp: float

    def pose(self) -> Pose:
        return Pose(self.position.copy(), rot_z(self.heading), self.stamp)


@dataclass
class DelayedMeasurement:
    position: np.ndarray
    heading: float
    t_meas: float
    t_avail: float

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float)
        if self.t_avail < self.t_meas:
            raise ValueError("measurement available before acquisition")

    @property
    def delay(self) -> float:
        return self.t_avail - self.t_meas

    def sort_key(self) -> tuple:
        # content-based tie break keeps replay independent of arrival order
        return (self.t_meas, float(self.position[0]), float(self.position[1]),
                float(self.position[2]), self.heading)


@dataclass
class DriftModel:
    rate: float = 0.0            # systematic drift magnitude per meter traveled
    walk: float = 0.0            # per-axis random walk std per sqrt(meter)
    heading_rate: float = 0.0    # rad per meter traveled
    degenerate_multiplier: float = 4.0


@dataclass
class DelayModel:
    mean: float = 0.111
    jitter: float = 0.02
    max_delay: float = 1.0

    def draw(self, rng: np.random.Generator) -> float:
        tau = rng.normal(self.mean, self.jitter)
        return float(min(max(tau, 0.0), self.max_delay))


class LocalizationSimulator:
    """Parametric stand-in for a scan-matching localizer.

    Produces pose measurements equal to the true pose plus accumulated
    drift, delivered after a randomized processing delay.
    """

    def __init__(self, drift: DriftModel, delay: DelayModel, rng: np.random.Generator):
        self.drift_model = drift
        self.delay_model = delay
        self._rng = rng
        self._direction = None
        self._drift = np.zeros(3)
        self._heading_drift = 0.0
        self._last_position = None

    def step(self, true_pose: Pose, t: float, degenerate: bool = False) -> DelayedMeasurement:
        if self._direction is None:
            u = self._rng.normal(size=3)
            n = np.linalg.norm(u)
            self._direction = u / n if n > 0 else np.array([1.0, 0.0, 0.0])
        if self._last_position is not None:
            ds = float(np.linalg.norm(true_pose.position - self._last_position))
            mult = self.drift_model.degenerate_multiplier if degenerate else 1.0
            self._drift += self._direction * self.drift_model.rate * ds * mult
            if self.drift_model.walk > 0.0 and ds > 0.0:
                self._drift += self._rng.normal(0.0, self.drift_model.walk * math.sqrt(ds),
                                                size=3) * mult
            self._heading_drift += self.drift_model.heading_rate * ds * mult
        self._last_position = true_pose.position.copy()
        tau = self.delay_model.draw(self._rng)
        return DelayedMeasurement(true_pose.position + self._drift,
                                  wrap_angle(true_pose.heading + self._heading_drift),
                                  t_meas=t, t_avail=t + tau)


# -- point mass filter core -------------------------------------------------

def _transition(dt: float) -> np.ndarray:
    return np.array([[1.0, dt, 0.5 * dt * dt],
                     [0.0, 1.0, dt],
                     [0.0, 0.0, 1.0]])


def _process_noise(dt: float, accel_noise: float) -> np.ndarray:
    # white-noise acceleration model, integrated
    q = accel_noise ** 2
    return q * np.array([
        [dt ** 5 / 20.0, dt ** 4 / 8.0, dt ** 3 / 6.0],
        [dt ** 4 / 8.0, dt ** 3 / 3.0, dt ** 2 / 2.0],
        [dt ** 3 / 6.0, dt ** 2 / 2.0, dt],
    ])


@dataclass
class _FilterState:
    """Shared-covariance triple-axis point mass + heading filter state."""

    x: np.ndarray            # (3 axes, 3 comps [p, v, a])
    cov: np.ndarray          # (3, 3) shared across axes
    heading: float
    heading_bias: float
    hcov: np.ndarray         # (2, 2)
    time: float

    def copy(self) -> "_FilterState":
        return _FilterState(self.x.copy(), self.cov.copy(), self.heading,
                            self.heading_bias, self.hcov.copy(), self.time)


def _predict(state: _FilterState, dt: float, accel_noise: float,
             gyro_rate: float, gyro_noise: float) -> None:
    if dt <= 0.0:
        return
    f = _transition(dt)
    state.x = state.x @ f.T
    state.cov = f @ state.cov @ f.T + _process_noise(dt, accel_noise)
    state.heading = wrap_angle(state.heading + (gyro_rate - state.heading_bias) * dt)
    fh = np.array([[1.0, -dt], [0.0, 1.0]])
    qh = np.array([[gyro_noise ** 2 * dt, 0.0], [0.0, 1e-8 * dt]])
    state.hcov = fh @ state.hcov @ fh.T + qh
    state.time += dt


def _correct(state: _FilterState, z: DelayedMeasurement, meas_noise: float,
             heading_noise: float) -> None:
    s = state.cov[0, 0] + meas_noise ** 2
    k = state.cov[:, 0] / s
    innov = z.position - state.x[:, 0]
    state.x = state.x + innov[:, None] * k[None, :]
    state.cov = state.cov - np.outer(k, state.cov[0, :])
    sh = state.hcov[0, 0] + heading_noise ** 2
    kh = state.hcov[:, 0] / sh
    dh = wrap_angle(z.heading - state.heading)
    state.heading = wrap_angle(state.heading + kh[0] * dh)
    state.heading_bias = state.heading_bias + kh[1] * dh
    state.hcov = state.hcov - np.outer(kh, state.hcov[0, :])


@dataclass
class RepredictorConfig:
    max_delay: float = 1.0       # tau_max window
    rate: float = 100.0          # output stream rate
    accel_noise: float = 0.5
    meas_noise: float = 0.02
    heading_meas_noise: float = 0.01
    gyro_noise: float = 0.005


class Repredictor:
    """Delay-compensating estimator with correction/state history buffers.

    Corrections arriving out of order are spliced into the buffered
    history at their acquisition time; every state after that instant is
    recomputed by re-applying the buffered corrections in order.
    """

    def __init__(self, cfg: RepredictorConfig, t0: float = 0.0,
                 initial_position: np.ndarray | None = None,
                 initial_heading: float = 0.0):
        self.cfg = cfg
        x = np.zeros((3, 3))
        if initial_position is not None:
            x[:, 0] = np.asarray(initial_position, dtype=float)
        base = _FilterState(x, np.eye(3) * 0.01, initial_heading, 0.0,
                            np.eye(2) * 1e-4, t0)
        self._base = base                      # state before the oldest buffered correction
        self._corrections: list[tuple] = []    # sorted (key, DelayedMeasurement)
        self._snapshots: list[_FilterState] = []   # state after i-th correction
        self._gyro_rate = 0.0
        self.now = t0

    # -- inputs ---------------------------------------------------------

    def set_gyro(self, rate: float) -> None:
        """Angular-rate input used by prediction until the next update."""
        self._gyro_rate = float(rate)

    def insert(self, z: DelayedMeasurement) -> None:
        """Fuse a (possibly delayed) correction.

        Raises :class:`StaleMeasurementError` when the acquisition stamp
        precedes the retained history window.
        """
        self.now = max(self.now, z.t_avail)
        if z.t_meas < self.now - self.cfg.max_delay - 1e-12:
            raise StaleMeasurementError(
                f"correction at t={z.t_meas:.3f} older than window "
                f"[{self.now - self.cfg.max_delay:.3f}, {self.now:.3f}]")
        if z.t_meas < self._base.time:
            raise StaleMeasurementError(
                f"correction at t={z.t_meas:.3f} precedes buffered history")
        key = z.sort_key()
        lo = 0
        while lo < len(self._corrections) and self._corrections[lo][0] <= key:
            lo += 1
        self._corrections.insert(lo, (key, z))
        self._replay_from(lo)
        self._trim()

    def _replay_from(self, index: int) -> None:
        state = self._snapshots[index - 1].copy() if index > 0 else self._base.copy()
        del self._snapshots[index:]
        for _, z in self._corrections[index:]:
            _predict(state, z.t_meas - state.time, self.cfg.accel_noise,
                     self._gyro_rate, self.cfg.gyro_noise)
            _correct(state, z, self.cfg.meas_noise, self.cfg.heading_meas_noise)
            self._snapshots.append(state.copy())

    def _trim(self) -> None:
        cutoff = self.now - self.cfg.max_delay
        while self._corrections and self._corrections[0][1].t_meas < cutoff:
            self._corrections.pop(0)
            self._base = self._snapshots.pop(0)

    # -- outputs --------------------------------------------------------

    def estimate(self, t: float) -> StateEstimate:
        """State estimate extrapolated to time ``t`` (pure query)."""
        state = self._snapshots[-1].copy() if self._snapshots else self._base.copy()
        _predict(state, t - state.time, self.cfg.accel_noise,
                 self._gyro_rate, self.cfg.gyro_noise)
        return StateEstimate(state.x[:, 0].copy(), state.x[:, 1].copy(),
                             state.x[:, 2].copy(), state.heading,
                             self._gyro_rate - state.heading_bias, t)

    def stream(self, t0: float, t1: float) -> list[StateEstimate]:
        """Fixed-rate estimate stream on the filter's output grid."""
        dt = 1.0 / self.cfg.rate
        n0 = int(math.ceil(round(t0 / dt, 9)))
        n1 = int(math.floor(round(t1 / dt, 9)))
        return [self.estimate(n * dt) for n in range(n0, n1 + 1)]


def in_order_filter(measurements: list[DelayedMeasurement], cfg: RepredictorConfig,
                    t0: float = 0.0, initial_position: np.ndarray | None = None,
                    gyro_rate: float = 0.0) -> _FilterState:
    """Reference filter: process corrections sorted by acquisition time.

    Used by tests as the ground-truth behavior the repredictor must match.
    """
    x = np.zeros((3, 3))
    if initial_position is not None:
        x[:, 0] = np.asarray(initial_position, dtype=float)
    state = _FilterState(x, np.eye(3) * 0.01, 0.0, 0.0, np.eye(2) * 1e-4, t0)
    for z in sorted(measurements, key=lambda m: m.sort_key()):
        _predict(state, z.t_meas - state.time, cfg.accel_noise, gyro_rate, cfg.gyro_noise)
        _correct(state, z, cfg.meas_noise, cfg.heading_meas_noise)
    return state
