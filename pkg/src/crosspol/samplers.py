"""Generators of the initial single-source ensembles."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ensemble import WeightedEnsemble, as_generator, multinomial_resample
from .errors import InvalidArgument
from .fusion import LikelihoodTerm, sum_log_likelihoods


def importance_resample_init(
    prior_sampler: Callable[[int, np.random.Generator], np.ndarray],
    likelihoods: Sequence[LikelihoodTerm],
    n: int,
    rng,
) -> WeightedEnsemble:
    """Sample the prior, weight by the given likelihoods, resample to ``n`` equal weights.

    ``prior_sampler(n, rng)`` must return an ``(n, d)`` array (a 1-d array is
    read as ``d = 1``).
    """
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    rng = as_generator(rng)
    draws = np.asarray(prior_sampler(n, rng), dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    weighted = WeightedEnsemble(draws, sum_log_likelihoods(draws, likelihoods))
    return multinomial_resample(weighted, n, rng)


def random_walk_metropolis(
    log_target: Callable[[np.ndarray], np.ndarray],
    init,
    step_scales,
    n_samples: int,
    burn_in: int = 0,
    thin: int = 1,
    rng=None,
) -> tuple[WeightedEnsemble, float]:
    """Gaussian random-walk Metropolis.

    ``init`` is either one starting point ``(d,)`` or ``C`` starting points
    ``(C, d)``; in the latter case ``C`` independent chains advance in lockstep
    and ``log_target`` is called on ``(C, d)`` arrays, returning ``C`` values.
    ``n_samples`` is the total number of retained draws across chains and must
    be divisible by ``C``.

    Returns:
        The retained draws as an equally weighted ensemble, and the acceptance
        rate over all post-burn-in proposals.
    """
    rng = as_generator(rng)
    x = np.atleast_2d(np.asarray(init, dtype=float)).copy()
    n_chains, d = x.shape
    scales = np.broadcast_to(np.asarray(step_scales, dtype=float), (d,))
    if (scales < 0).any():
        raise InvalidArgument("step scales must be non-negative")
    if n_samples < 1 or n_samples % n_chains:
        raise InvalidArgument(f"n_samples={n_samples} must be a positive multiple of {n_chains} chains")
    if burn_in < 0 or thin < 1:
        raise InvalidArgument("burn_in must be >= 0 and thin >= 1")

    lp = np.asarray(log_target(x), dtype=float).reshape(n_chains)
    if not np.isfinite(lp).all():
        raise InvalidArgument("log target is not finite at the initial point")

    per_chain = n_samples // n_chains
    n_steps = burn_in + per_chain * thin
    out = np.empty((per_chain, n_chains, d))
    accepted = 0
    kept = 0
    block = max(1, min(n_steps, 4096))
    for step in range(n_steps):
        b = step % block
        if b == 0:
            # random draws come in blocks; per-step calls dominate runtime otherwise
            m = min(block, n_steps - step)
            noise = rng.standard_normal((m, n_chains, d)) * scales
            log_us = np.log(rng.random((m, n_chains)))
        prop = x + noise[b]
        lp_prop = np.asarray(log_target(prop), dtype=float).reshape(n_chains)
        log_u = log_us[b]
        # uphill moves always pass since log_u < 0
        ok = log_u < lp_prop - lp
        x[ok] = prop[ok]
        lp[ok] = lp_prop[ok]
        if step >= burn_in:
            accepted += int(ok.sum())
            s = step - burn_in
            if (s + 1) % thin == 0:
                out[kept] = x
                kept += 1
    n_post = (n_steps - burn_in) * n_chains
    rate = accepted / n_post if n_post else 0.0
    # chain-major order keeps each chain's draws contiguous
    samples = out.transpose(1, 0, 2).reshape(n_samples, d)
    return WeightedEnsemble.uniform(samples), rate
