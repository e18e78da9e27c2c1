"""Sequential cross-pollination of trajectory ensembles under a stochastic motion model.

Every trajectory keeps the state at each observation epoch, so a likelihood
for an earlier epoch can still be applied to it later ("backward in time").
At epoch ``j`` two ensembles are combined:

* the running fused ensemble, moved one step forward and weighted by ``g_j``;
* a fresh ensemble built from the prior and ``g_j`` alone, weighted by
  ``g_1 ... g_{j-1}`` evaluated on its saved historical states.

The two are pooled with norming-apart or norming-together weights and
resampled to ``N`` equally weighted trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .ensemble import (
    as_generator,
    effective_sample_size,
    normalize_log_weights,
    resample_indices,
)
from .errors import InvalidArgument
from .fusion import LikelihoodTerm, pool_log_weights

RUNNING, FRESH = 0, 1

_PERTURB_SLICES = {
    "latest": lambda k: slice(-1, None),
    "pending": lambda k: slice(k + 1, None),
    "all": lambda k: slice(None),
}


@dataclass
class TrajectoryEnsemble:
    """``N`` trajectories of saved states, shape ``(N, current_epoch, d)``.

    ``states[:, k]`` is the state at epoch ``k + 1``.
    """

    states: np.ndarray
    log_weights: np.ndarray
    lineage: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3:
            raise InvalidArgument("states must have shape (N, epochs, d)")
        self.log_weights = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if self.log_weights.shape[0] != self.states.shape[0]:
            raise InvalidArgument("one log-weight per trajectory required")

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def current_epoch(self) -> int:
        return self.states.shape[1]

    @property
    def latest(self) -> np.ndarray:
        return self.states[:, -1]

    def mean_trajectory(self) -> np.ndarray:
        w, _ = normalize_log_weights(self.log_weights)
        return np.einsum("i,itd->td", w, self.states)


@dataclass
class MotionModel:
    """``step(states, rng)`` maps an ``(N, d)`` array of states one epoch forward."""

    step: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    state_dim: int


@dataclass
class SequentialConfig:
    n_particles: int = 10_000
    ess_threshold_fraction: float = 0.5
    # per-dimension jitter after a mid-weighting resample; None disables jitter
    perturb_bandwidth: Optional[Sequence[float]] = None
    resample_during_backward: bool = True
    # "forward" applies g_1 .. g_{j-1}; "reverse" applies g_{j-1} .. g_1
    backward_order: str = "forward"
    # skip fresh ensembles entirely: the run reduces to a bootstrap SIR filter
    restrict_to_running: bool = False
    preserve_mass_on_resample: bool = True
    # which saved states are jittered after a mid-weighting resample: the
    # latest only, those whose likelihood is not yet applied, or all of them
    perturb_scope: str = "latest"

    def __post_init__(self):
        if not 0.0 < self.ess_threshold_fraction <= 1.0:
            raise InvalidArgument("ess_threshold_fraction must lie in (0, 1]")
        if self.n_particles < 1:
            raise InvalidArgument("n_particles must be >= 1")
        if self.backward_order not in ("forward", "reverse"):
            raise InvalidArgument("backward_order must be 'forward' or 'reverse'")
        if self.perturb_scope not in _PERTURB_SLICES:
            raise InvalidArgument("perturb_scope must be 'latest', 'pending' or 'all'")


@dataclass
class SequentialModel:
    """Everything ``run_sequential`` needs besides the data."""

    prior_sampler: Callable[[int, np.random.Generator], np.ndarray]
    motion: MotionModel


def fresh_single_obs_ensemble(
    prior_sampler, motion: MotionModel, epoch: int, g: LikelihoodTerm, n: int, rng
) -> TrajectoryEnsemble:
    """Prior draws moved forward to ``epoch`` (saving every state), importance-resampled on ``g``."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if epoch < 1:
        raise InvalidArgument("epoch is 1-based")
    rng = as_generator(rng)
    x = np.asarray(prior_sampler(n, rng), dtype=float)
    states = np.empty((n, epoch, motion.state_dim))
    for t in range(epoch):
        x = motion.step(x, rng)
        states[:, t] = x
    w, _ = normalize_log_weights(g(states[:, -1]))
    idx = resample_indices(w, n, rng)
    return TrajectoryEnsemble(states[idx], np.full(n, -np.log(n)), np.full(n, FRESH))


def init_from_first_observation(prior_sampler, motion, g1, n, rng) -> TrajectoryEnsemble:
    ens = fresh_single_obs_ensemble(prior_sampler, motion, 1, g1, n, rng)
    ens.lineage = np.full(n, RUNNING)
    return ens


def backward_weights(
    fresh: TrajectoryEnsemble,
    past_likelihoods: Sequence[LikelihoodTerm],
    cfg: SequentialConfig,
    rng,
) -> TrajectoryEnsemble:
    """Weight a fresh ensemble by the likelihoods of all earlier epochs.

    When the effective sample size falls below ``cfg.ess_threshold_fraction * N``
    part-way through, the fresh ensemble alone is resampled and its latest
    state jittered. Resampled particles carry the mean of the weights they
    replace, so the ensemble's total mass (what norming-together compares) is
    unchanged by the resample.
    """
    rng = as_generator(rng)
    states = fresh.states
    lw = fresh.log_weights.copy()
    n = fresh.size
    order = range(len(past_likelihoods))
    if cfg.backward_order == "reverse":
        order = reversed(order)
    threshold = cfg.ess_threshold_fraction * n
    for k in order:
        lw = lw + past_likelihoods[k](states[:, k])
        if not cfg.resample_during_backward:
            continue
        w, log_mass = normalize_log_weights(lw)
        if effective_sample_size(w) < threshold:
            idx = resample_indices(w, n, rng)
            states = states[idx].copy()
            lw = np.full(n, (log_mass if cfg.preserve_mass_on_resample else 0.0) - np.log(n))
            if cfg.perturb_bandwidth is not None:
                bw = np.asarray(cfg.perturb_bandwidth, dtype=float)
                sl = _PERTURB_SLICES[cfg.perturb_scope](k)
                states[:, sl] += rng.standard_normal(states[:, sl].shape) * bw
    return TrajectoryEnsemble(states, lw, fresh.lineage)


def sequential_step(
    running: TrajectoryEnsemble,
    fresh: Optional[TrajectoryEnsemble],
    past_likelihoods: Sequence[LikelihoodTerm],
    g: LikelihoodTerm,
    motion: MotionModel,
    cfg: SequentialConfig,
    scheme: str,
    rng,
) -> TrajectoryEnsemble:
    """Advance the running ensemble from epoch ``j - 1`` to ``j`` and cross-pollinate it with ``fresh``."""
    if scheme not in ("apart", "together"):
        raise InvalidArgument("sequential fusion supports the 'apart' and 'together' schemes")
    rng = as_generator(rng)
    j = running.current_epoch + 1
    if len(past_likelihoods) != j - 1:
        raise InvalidArgument(f"expected {j - 1} past likelihoods, got {len(past_likelihoods)}")

    moved = motion.step(running.latest, rng)
    run_states = np.concatenate([running.states, moved[:, None, :]], axis=1)
    _, log_z = normalize_log_weights(running.log_weights)
    run_lw = running.log_weights - log_z + g(moved)

    groups_states = [run_states]
    groups_lw = [run_lw]
    if not cfg.restrict_to_running:
        if fresh is None or fresh.current_epoch != j:
            raise InvalidArgument(f"fresh ensemble must cover epoch {j}")
        _, log_zf = normalize_log_weights(fresh.log_weights)
        fresh = TrajectoryEnsemble(fresh.states, fresh.log_weights - log_zf, fresh.lineage)
        weighted = backward_weights(fresh, past_likelihoods, cfg, rng)
        groups_states.append(weighted.states)
        groups_lw.append(weighted.log_weights)

    pooled = np.concatenate(pool_log_weights(groups_lw, scheme))
    states = np.concatenate(groups_states)
    lineage = np.concatenate([np.full(s.shape[0], i) for i, s in enumerate(groups_states)])
    n = cfg.n_particles
    idx = resample_indices(np.exp(pooled - logsumexp(pooled)), n, rng)
    return TrajectoryEnsemble(states[idx], np.full(n, -np.log(n)), lineage[idx])


def run_sequential(
    model: SequentialModel,
    likelihoods: Sequence[LikelihoodTerm],
    cfg: SequentialConfig,
    scheme: str = "together",
    rng=None,
    on_epoch: Optional[Callable[[int, Optional[TrajectoryEnsemble], TrajectoryEnsemble], None]] = None,
) -> TrajectoryEnsemble:
    """Fuse time-ordered single observations into an estimate of ``P(x_1:M | y_1:M)``.

    ``likelihoods[k]`` applies to the state at epoch ``k + 1``. ``on_epoch``
    is called after every epoch with the fresh single-observation ensemble
    (None when fresh ensembles are disabled) and the fused ensemble.
    """
    if not likelihoods:
        raise InvalidArgument("need at least one observation")
    rng = as_generator(rng)
    n = cfg.n_particles
    running = init_from_first_observation(model.prior_sampler, model.motion, likelihoods[0], n, rng)
    if on_epoch is not None:
        on_epoch(1, running, running)
    for j in range(2, len(likelihoods) + 1):
        fresh = None
        if not cfg.restrict_to_running:
            fresh = fresh_single_obs_ensemble(
                model.prior_sampler, model.motion, j, likelihoods[j - 1], n, rng
            )
        running = sequential_step(
            running, fresh, likelihoods[: j - 1], likelihoods[j - 1],
            model.motion, cfg, scheme, rng,
        )
        if on_epoch is not None:
            on_epoch(j, fresh, running)
    return running
