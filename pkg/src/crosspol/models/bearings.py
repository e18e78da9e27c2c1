"""Two-sensor bearings-only tracking with a nearly-constant-velocity target.

State ordering is ``(x, xdot, y, ydot)``; one motion step is one time unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..ensemble import as_generator
from ..errors import InvalidArgument
from ..fusion import LikelihoodTerm

PHI = np.array(
    [
        [1.0, 1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 1.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)
GAMMA = np.array([[0.5, 0.0], [1.0, 0.0], [0.0, 0.5], [0.0, 1.0]])
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class BearingsScenario:
    sigma_q: float = 0.001
    sigma_r: float = 0.005
    sensors: list = field(default_factory=lambda: [(-1.0, 1.0), (1.0, -1.0)])
    prior_mean: list = field(default_factory=lambda: [0.0, 0.0, 0.4, -0.05])
    prior_sd: list = field(default_factory=lambda: [0.5, 0.005, 0.3, 0.01])
    truth_x0: list = field(default_factory=lambda: [-0.05, 0.001, 0.7, -0.055])
    n_steps: int = 20
    phi: np.ndarray = field(default_factory=lambda: PHI.copy())
    gamma: np.ndarray = field(default_factory=lambda: GAMMA.copy())

    def __post_init__(self):
        self.sensors = [tuple(map(float, s)) for s in self.sensors]
        self.prior_mean = np.asarray(self.prior_mean, dtype=float)
        self.prior_sd = np.asarray(self.prior_sd, dtype=float)
        self.truth_x0 = np.asarray(self.truth_x0, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.sigma_q < 0 or self.sigma_r <= 0:
            raise InvalidArgument("need sigma_q >= 0 and sigma_r > 0")
        if (self.prior_sd < 0).any():
            raise InvalidArgument("prior standard deviations must be non-negative")
        if self.n_steps < 1:
            raise InvalidArgument("n_steps must be >= 1")

    @property
    def prior_cov(self) -> np.ndarray:
        return np.diag(self.prior_sd**2)

    def sensor_for_epoch(self, epoch: int) -> int:
        """Index of the sensor observing 1-based ``epoch``; sensors take turns."""
        return (epoch - 1) % len(self.sensors)

    def prior_sample(self, n: int, rng) -> np.ndarray:
        rng = as_generator(rng)
        return self.prior_mean + rng.standard_normal((n, 4)) * self.prior_sd


def motion_step(states, sigma_q: float, rng, phi=PHI, gamma=GAMMA) -> np.ndarray:
    """``Phi x + Gamma w`` with ``w ~ N(0, sigma_q**2 I_2)``; accepts ``(4,)`` or ``(N, 4)``."""
    s = np.asarray(states, dtype=float)
    nxt = s @ phi.T
    if sigma_q > 0:
        w = as_generator(rng).standard_normal(s.shape[:-1] + (2,)) * sigma_q
        nxt = nxt + w @ gamma.T
    return nxt


def bearing(states, sensor) -> np.ndarray:
    """Four-quadrant bearing ``atan2(y - y_s, x - x_s)`` in ``(-pi, pi]``."""
    s = np.asarray(states, dtype=float)
    dx = s[..., 0] - sensor[0]
    dy = s[..., 2] - sensor[1]
    if np.any((dx == 0) & (dy == 0)):
        raise InvalidArgument("target coincides with the sensor")
    out = np.arctan2(dy, dx)
    return float(out) if out.ndim == 0 else out


def wrap_angle(a):
    """Wrap to ``(-pi, pi]``."""
    a = np.asarray(a, dtype=float)
    out = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    return float(out) if out.ndim == 0 else out


def bearing_log_likelihood(states, z: float, sensor, sigma_r: float):
    s = np.asarray(states, dtype=float)
    dx = s[..., 0] - sensor[0]
    dy = s[..., 2] - sensor[1]
    resid = wrap_angle(np.arctan2(dy, dx) - z)
    out = -0.5 * (np.asarray(resid) / sigma_r) ** 2 - np.log(sigma_r) - LOG_SQRT_2PI
    # a particle sitting on the sensor has no defined bearing
    out = np.where((dx == 0) & (dy == 0), -np.inf, out)
    return float(out) if out.ndim == 0 else out


def likelihood_term(z: float, sensor, sigma_r: float, label: str = "") -> LikelihoodTerm:
    return LikelihoodTerm(
        lambda p: bearing_log_likelihood(p, z, sensor, sigma_r),
        label or f"bearing z={z:.6f}",
    )


@dataclass
class BearingsTruth:
    states: np.ndarray  # (n_steps, 4), epochs 1..n_steps
    observations: np.ndarray  # (n_steps,)
    sensor_ids: np.ndarray  # (n_steps,)


def simulate_truth(scenario: BearingsScenario, rng) -> BearingsTruth:
    """Propagate ``truth_x0`` for ``n_steps`` and take one noisy bearing per step."""
    rng = as_generator(rng)
    states = np.empty((scenario.n_steps, 4))
    x = scenario.truth_x0.copy()
    for t in range(scenario.n_steps):
        x = motion_step(x, scenario.sigma_q, rng, scenario.phi, scenario.gamma)
        states[t] = x
    ids = np.array([scenario.sensor_for_epoch(t + 1) for t in range(scenario.n_steps)])
    clean = np.array([bearing(states[t], scenario.sensors[ids[t]]) for t in range(scenario.n_steps)])
    noise = rng.standard_normal(scenario.n_steps) * scenario.sigma_r
    return BearingsTruth(states, wrap_angle(clean + noise), ids)


def likelihoods_for(scenario: BearingsScenario, truth: BearingsTruth) -> list[LikelihoodTerm]:
    return [
        likelihood_term(
            truth.observations[t],
            scenario.sensors[truth.sensor_ids[t]],
            scenario.sigma_r,
            f"sensor={truth.sensor_ids[t] + 1}, t={t + 1}",
        )
        for t in range(len(truth.observations))
    ]


def sequential_model(scenario: BearingsScenario):
    from ..sequential import MotionModel, SequentialModel

    def step(states, rng):
        return motion_step(states, scenario.sigma_q, rng, scenario.phi, scenario.gamma)

    return SequentialModel(prior_sampler=scenario.prior_sample, motion=MotionModel(step, 4))
