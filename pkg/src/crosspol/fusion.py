"""Batch cross-pollination.

Each input holds an equally weighted ensemble built from one slice of the data
together with the likelihoods of every other slice. Fusion weights each
ensemble by its complement likelihoods, pools the ``M`` weighted ensembles and
resamples the pool. The schemes differ only in how the pooled weights are
normalized:

``apart``
    normalize inside each partition, then give each partition mass ``1/M``.
``together``
    normalize once over all ``M * N`` particles.
``dm``
    deterministic-mixture weights ``prod_k g_k / sum_k g_k``, normalized
    together.

The pool is materialized before resampling, so memory use is ``M * N * d``
floats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .ensemble import WeightedEnsemble, multinomial_resample, normalize_log_weights
from .errors import InvalidArgument, PartitionCollapse, TotalWeightCollapse

SCHEMES = ("apart", "together", "dm")


@dataclass
class LikelihoodTerm:
    """Log-density of one observation group as a function of the particle state.

    ``evaluate`` receives an ``(N, d)`` array and returns ``N`` log-densities.
    It must be deterministic and return ``-inf`` (never NaN) where the density
    is zero. Calling the term on a single ``(d,)`` particle returns a float.
    """

    evaluate: Callable[[np.ndarray], np.ndarray]
    label: str = ""

    def __call__(self, particles) -> np.ndarray:
        x = np.asarray(particles, dtype=float)
        single = x.ndim == 1
        out = np.asarray(self.evaluate(np.atleast_2d(x)), dtype=float).reshape(-1)
        if np.isnan(out).any():
            raise InvalidArgument(f"likelihood {self.label!r} returned NaN")
        return float(out[0]) if single else out


@dataclass
class FusionInput:
    """One partition: its initial ensemble plus the likelihoods it has and has not seen.

    ``log_evidence`` is optional and only read by the deterministic-mixture
    scheme: when set for every input it is the log marginal likelihood of that
    partition's own data and divides its term in the mixture denominator.
    """

    ensemble: WeightedEnsemble
    complement_likelihoods: list = field(default_factory=list)
    own_likelihoods: list = field(default_factory=list)
    log_evidence: Optional[float] = None


def sum_log_likelihoods(particles: np.ndarray, terms: Sequence[LikelihoodTerm]) -> np.ndarray:
    total = np.zeros(particles.shape[0])
    for term in terms:
        total = total + term(particles)
    return total


def cross_epoch_log_weights(inp: FusionInput) -> np.ndarray:
    """Unnormalized log-weights ``sum over complement k of log g_k(theta_i)``."""
    if inp.ensemble.size < 1:
        raise InvalidArgument("empty particle set")
    return sum_log_likelihoods(inp.ensemble.particles, inp.complement_likelihoods)


def deterministic_mixture_log_weights(inputs: Sequence[FusionInput]) -> list[np.ndarray]:
    """Per-input log of ``prod_k g_k / sum_k g_k`` over all ``M`` likelihood groups.

    Without evidences the denominator is the plain unweighted sum of the
    groups. With ``log_evidence`` on every input, group ``k`` enters the
    denominator as ``g_k / Z_k``, which is the proposal mixture density up to
    a constant.
    """
    _check_inputs(inputs)
    groups = [list(inp.own_likelihoods) for inp in inputs]
    if any(not g for g in groups) and len(inputs) > 1:
        raise InvalidArgument("deterministic mixture needs own_likelihoods on every input")
    evid = [inp.log_evidence for inp in inputs]
    use_evidence = all(z is not None for z in evid)
    out = []
    for inp in inputs:
        x = inp.ensemble.particles
        per_group = np.stack([sum_log_likelihoods(x, g) for g in groups])
        numerator = per_group.sum(axis=0)
        if use_evidence:
            per_group = per_group - np.asarray(evid, dtype=float)[:, None]
        with np.errstate(invalid="ignore"):
            denom = logsumexp(per_group, axis=0)
            lw = numerator - denom
        lw[np.isneginf(denom) | np.isneginf(numerator)] = -np.inf
        out.append(lw)
    return out


def pool_log_weights(log_weights: Sequence[np.ndarray], scheme: str) -> list[np.ndarray]:
    """Normalize per-partition unnormalized log-weights into pooled log-masses.

    The returned arrays, concatenated, exponentiate to a probability vector.
    ``dm`` pools like ``together``; its difference lies in how the raw weights
    were formed.
    """
    if scheme not in SCHEMES:
        raise InvalidArgument(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if not log_weights:
        raise InvalidArgument("nothing to pool")
    m = len(log_weights)
    if scheme == "apart":
        pooled = []
        for j, lw in enumerate(log_weights):
            try:
                _, log_z = normalize_log_weights(lw)
            except TotalWeightCollapse:
                raise PartitionCollapse(j) from None
            pooled.append(np.asarray(lw, dtype=float) - log_z - np.log(m))
        return pooled
    _, log_z = normalize_log_weights(np.concatenate(log_weights))
    return [np.asarray(lw, dtype=float) - log_z for lw in log_weights]


def partition_masses(pooled: Sequence[np.ndarray]) -> np.ndarray:
    """Total pooled probability assigned to each partition."""
    return np.array([np.exp(logsumexp(lw)) for lw in pooled])


def pooled_ensemble(inputs: Sequence[FusionInput], scheme: str) -> WeightedEnsemble:
    """The weighted pool (size ``M * N``) before resampling, lineage-tagged by partition."""
    _check_inputs(inputs)
    if scheme == "dm":
        raw = deterministic_mixture_log_weights(inputs)
    else:
        raw = [cross_epoch_log_weights(inp) for inp in inputs]
    pooled = pool_log_weights(raw, scheme)
    particles = np.concatenate([inp.ensemble.particles for inp in inputs])
    lineage = np.concatenate(
        [np.full(inp.ensemble.size, j) for j, inp in enumerate(inputs)]
    )
    return WeightedEnsemble(particles, np.concatenate(pooled), lineage)


def fuse(inputs: Sequence[FusionInput], n_out: int, rng, scheme: str = "together") -> WeightedEnsemble:
    """Cross-pollinate ``inputs`` and resample the pool to ``n_out`` equal-weight particles."""
    return multinomial_resample(pooled_ensemble(inputs, scheme), n_out, rng)


def fuse_norming_apart(inputs, n_out, rng) -> WeightedEnsemble:
    return fuse(inputs, n_out, rng, "apart")


def fuse_norming_together(inputs, n_out, rng) -> WeightedEnsemble:
    return fuse(inputs, n_out, rng, "together")


def fuse_deterministic_mixture(inputs, n_out, rng) -> WeightedEnsemble:
    return fuse(inputs, n_out, rng, "dm")


def _check_inputs(inputs: Sequence[FusionInput]) -> None:
    if len(inputs) < 1:
        raise InvalidArgument("need at least one fusion input")
    dims = {inp.ensemble.dim for inp in inputs}
    if len(dims) != 1:
        raise InvalidArgument(f"inputs disagree on particle dimension: {sorted(dims)}")
