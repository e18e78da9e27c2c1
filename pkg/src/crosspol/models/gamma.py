"""Conjugate Gamma problem with a closed-form posterior.

Prior ``x ~ Gamma(shape=k0, scale=theta0)``; observations
``y_j | x ~ Gamma(shape=k_j, scale=1/x)``. Shape/scale is used throughout
because it makes the posterior update

    shape = k0 + sum k_j,   scale = 1 / (1/theta0 + sum y_j)

hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from ..ensemble import as_generator
from ..errors import InvalidArgument
from ..fusion import FusionInput, LikelihoodTerm


@dataclass
class GammaModelParams:
    k0: float = 2.5
    theta0: float = 0.5
    # (y_j, k_j) pairs
    obs: list = field(default_factory=lambda: [(1.0, 4.0), (2.0, 10.0), (3.0, 25.0)])

    def __post_init__(self):
        self.obs = [(float(y), float(k)) for y, k in self.obs]
        if self.k0 <= 0 or self.theta0 <= 0:
            raise InvalidArgument("prior shape and scale must be positive")
        for y, k in self.obs:
            if y <= 0 or k <= 0:
                raise InvalidArgument(f"observation (y={y}, k={k}) must have y > 0, k > 0")


def prior_sample(params: GammaModelParams, n: int, rng) -> np.ndarray:
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    return as_generator(rng).gamma(params.k0, params.theta0, size=n)


def obs_log_likelihood(x, y: float, k: float):
    """``log Gamma-pdf(y; shape k, scale 1/x)``; ``-inf`` where ``x <= 0``."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = k * np.log(x) - gammaln(k) + (k - 1.0) * np.log(y) - x * y
    out = np.where(x > 0, out, -np.inf)
    return float(out) if out.ndim == 0 else out


def log_evidence(params: GammaModelParams, y: float, k: float) -> float:
    """Log marginal density of one observation under the prior (compound Gamma)."""
    k0, th = params.k0, params.theta0
    return float(
        gammaln(k0 + k) - gammaln(k0) - gammaln(k)
        + (k - 1.0) * np.log(y) - k0 * np.log(th)
        - (k0 + k) * np.log(1.0 / th + y)
    )


def analytic_posterior(params: GammaModelParams, which=None) -> tuple[float, float]:
    """Posterior (shape, scale) given all observations, or only those indexed by ``which``."""
    obs = params.obs if which is None else [params.obs[i] for i in which]
    shape = params.k0 + sum(k for _, k in obs)
    scale = 1.0 / (1.0 / params.theta0 + sum(y for y, _ in obs))
    return shape, scale


def posterior_moments(shape: float, scale: float) -> tuple[float, float, float, float]:
    """Mean, variance, skewness and (non-excess) kurtosis of Gamma(shape, scale)."""
    return (
        shape * scale,
        shape * scale**2,
        2.0 / np.sqrt(shape),
        3.0 + 6.0 / shape,
    )


def likelihood_term(y: float, k: float, label: str = "") -> LikelihoodTerm:
    return LikelihoodTerm(
        lambda p: obs_log_likelihood(p[:, 0], y, k),
        label or f"gamma y={y:g} k={k:g}",
    )


def likelihood_terms(params: GammaModelParams) -> list[LikelihoodTerm]:
    return [likelihood_term(y, k, f"obs {j + 1}") for j, (y, k) in enumerate(params.obs)]


def fusion_inputs(params: GammaModelParams, n: int, rng, with_evidence: bool = False) -> list[FusionInput]:
    """One single-observation ensemble per observation, built by importance resampling."""
    from ..samplers import importance_resample_init

    rng = as_generator(rng)
    terms = likelihood_terms(params)
    inputs = []
    for j, term in enumerate(terms):
        ens = importance_resample_init(
            lambda m, r: prior_sample(params, m, r)[:, None], [term], n, rng
        )
        ens.lineage = np.full(n, j)
        inputs.append(
            FusionInput(
                ensemble=ens,
                complement_likelihoods=[t for i, t in enumerate(terms) if i != j],
                own_likelihoods=[term],
                log_evidence=log_evidence(params, *params.obs[j]) if with_evidence else None,
            )
        )
    return inputs
