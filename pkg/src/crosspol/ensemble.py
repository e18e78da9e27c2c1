"""Weighted particle ensembles and the log-domain weight arithmetic shared by every fusion scheme.

Weights are always carried as natural-log values. A weighted ensemble with
``N`` particles in ``d`` dimensions is the discrete measure
``sum_i w_i * delta(x_i)`` with ``w_i = exp(log_w_i - logsumexp(log_w))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import ContractViolation, InvalidArgument, TotalWeightCollapse


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Parallel tasks take distinct ``stream_id`` values; the same pair always
    yields the same draw sequence.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an RngStream or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise InvalidArgument(f"cannot build a random generator from {type(rng).__name__}")


@dataclass
class WeightedEnsemble:
    """N particles of common dimension d with unnormalized log-weights.

    ``lineage`` optionally tags each particle with the index of the partition
    it came from; it survives resampling so pooled outputs can be traced back
    to their sources.
    """

    particles: np.ndarray
    log_weights: np.ndarray
    lineage: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        particles = np.asarray(self.particles, dtype=float)
        if particles.ndim == 1:
            particles = particles[:, None]
        if particles.ndim != 2 or particles.shape[0] < 1:
            raise InvalidArgument("particles must be an (N, d) array with N >= 1")
        log_weights = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if log_weights.shape[0] != particles.shape[0]:
            raise InvalidArgument(
                f"{log_weights.shape[0]} log-weights for {particles.shape[0]} particles"
            )
        if np.isnan(log_weights).any():
            raise InvalidArgument("log-weights contain NaN")
        self.particles = particles
        self.log_weights = log_weights
        if self.lineage is not None:
            lineage = np.asarray(self.lineage, dtype=int).reshape(-1)
            if lineage.shape[0] != particles.shape[0]:
                raise InvalidArgument("lineage length does not match particle count")
            self.lineage = lineage

    @classmethod
    def uniform(cls, particles, lineage=None) -> "WeightedEnsemble":
        particles = np.asarray(particles, dtype=float)
        if particles.ndim == 1:
            particles = particles[:, None]
        n = particles.shape[0]
        if isinstance(lineage, (int, np.integer)):
            lineage = np.full(n, int(lineage))
        return cls(particles, np.full(n, -np.log(n)), lineage)

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights)[0]

    def normalized(self) -> "WeightedEnsemble":
        w, log_z = normalize_log_weights(self.log_weights)
        return WeightedEnsemble(self.particles, self.log_weights - log_z, self.lineage)

    def mean(self) -> np.ndarray:
        return self.weights() @ self.particles

    def ess(self) -> float:
        return effective_sample_size(self.weights())


def normalize_log_weights(log_w) -> tuple[np.ndarray, float]:
    """Normalize log-weights with a max shift.

    Returns:
        ``(weights, log_normalizer)`` where ``weights`` sums to one and
        ``log_normalizer = logsumexp(log_w)``.

    Raises:
        TotalWeightCollapse: every entry is ``-inf``.
    """
    log_w = np.asarray(log_w, dtype=float).reshape(-1)
    if log_w.size == 0:
        raise InvalidArgument("no log-weights to normalize")
    if np.isnan(log_w).any():
        raise InvalidArgument("log-weights contain NaN")
    top = log_w.max()
    if top == -np.inf:
        raise TotalWeightCollapse("all log-weights are -inf")
    if top == np.inf:
        raise InvalidArgument("log-weights contain +inf")
    shifted = np.exp(log_w - top)
    total = shifted.sum()
    return shifted / total, float(top + np.log(total))


def effective_sample_size(weights) -> float:
    """Kish effective sample size ``1 / sum(w**2)`` of normalized weights."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size == 0:
        raise InvalidArgument("empty weight vector")
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ContractViolation(f"weights are not normalized (sum={w.sum()!r})")
    ess = 1.0 / np.dot(w, w)
    # rounding can push a uniform vector a hair past N
    return float(min(max(ess, 1.0), w.size))


def resample_indices(weights, n_out: int, rng) -> np.ndarray:
    """Indices of ``n_out`` i.i.d. categorical draws from ``weights``."""
    if n_out < 1:
        raise InvalidArgument("n_out must be a positive integer")
    rng = as_generator(rng)
    w = np.asarray(weights, dtype=float)
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, rng.random(n_out), side="right")
    return np.minimum(idx, w.size - 1)


def multinomial_resample(e: WeightedEnsemble, n_out: int, rng) -> WeightedEnsemble:
    """Draw ``n_out`` particles i.i.d. from ``e`` and return them equally weighted."""
    if not isinstance(n_out, (int, np.integer)) or n_out < 1:
        raise InvalidArgument("n_out must be a positive integer")
    w, _ = normalize_log_weights(e.log_weights)
    idx = resample_indices(w, int(n_out), rng)
    lineage = None if e.lineage is None else e.lineage[idx]
    return WeightedEnsemble(e.particles[idx], np.full(n_out, -np.log(n_out)), lineage)


def perturb(e: WeightedEnsemble, bandwidth, rng) -> WeightedEnsemble:
    """Add independent N(0, bandwidth_k**2) jitter to coordinate k of every particle."""
    bandwidth = np.atleast_1d(np.asarray(bandwidth, dtype=float))
    if bandwidth.shape != (e.dim,):
        raise InvalidArgument(f"bandwidth has length {bandwidth.size}, expected {e.dim}")
    if (bandwidth < 0).any():
        raise InvalidArgument("bandwidth must be non-negative")
    rng = as_generator(rng)
    jitter = rng.standard_normal(e.particles.shape) * bandwidth
    return WeightedEnsemble(e.particles + jitter, e.log_weights.copy(), e.lineage)


class Moments(NamedTuple):
    """First four weighted moments; ``skewness``/``kurtosis`` are None when variance is zero.

    Kurtosis is the plain standardized fourth moment (a Gaussian gives 3).
    """

    mean: float
    variance: float
    skewness: Optional[float]
    kurtosis: Optional[float]


def estimate_moments(e: WeightedEnsemble, dim: int = 0) -> Moments:
    w, _ = normalize_log_weights(e.log_weights)
    if not 0 <= dim < e.dim:
        raise InvalidArgument(f"dim {dim} out of range for {e.dim}-dimensional ensemble")
    x = e.particles[:, dim]
    mean = float(w @ x)
    c = x - mean
    c2 = c * c
    var = float(w @ c2)
    if var <= 0.0 or np.ptp(x) == 0.0:
        return Moments(mean, 0.0, None, None)
    skew = float(w @ (c2 * c)) / var**1.5
    kurt = float(w @ (c2 * c2)) / var**2
    return Moments(mean, var, skew, kurt)
