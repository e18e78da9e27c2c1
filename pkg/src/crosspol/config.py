"""Experiment configuration: JSON loading, defaults and validation.

A config file is a JSON object::

    {
      "experiment": "bearings-sequential",
      "scheme": "together",
      "n_particles": 10000,
      "n_trials": 1,
      "seed": 0,
      "output_path": "out/bearings.csv",
      "record_timing": true,
      "scenario": { ... }
    }

Every key is optional except ``experiment``. Unknown keys at any level raise
``ConfigError`` so that a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .errors import ConfigError
from .fusion import SCHEMES
from .models.orbit import OrbitScenario

EXPERIMENTS = ("gamma-convergence", "gamma-fuse", "orbit-fusion", "bearings-sequential")


@dataclass
class GammaScenario:
    k0: float = 2.5
    theta0: float = 0.5
    obs: list = field(default_factory=lambda: [[1.0, 4.0], [2.0, 10.0], [3.0, 25.0]])
    # particle counts swept by gamma-convergence (ignored by gamma-fuse)
    n_values: list = field(default_factory=lambda: [100, 1_000, 10_000, 100_000])
    # gamma-fuse only: correct the deterministic-mixture denominator by each
    # observation's evidence
    dm_evidence_correction: bool = False


@dataclass
class SequentialSettings:
    ess_threshold_fraction: float = 0.5
    # None means sigma_q / 10 in every state dimension
    perturb_bandwidth: Optional[list] = None
    resample_during_backward: bool = True
    backward_order: str = "forward"
    restrict_to_running: bool = False
    preserve_mass_on_resample: bool = True
    perturb_scope: str = "latest"


@dataclass
class BearingsScenarioConfig:
    sigma_q: float = 0.001
    sigma_r: float = 0.005
    sensors: list = field(default_factory=lambda: [[-1.0, 1.0], [1.0, -1.0]])
    prior_mean: list = field(default_factory=lambda: [0.0, 0.0, 0.4, -0.05])
    prior_sd: list = field(default_factory=lambda: [0.5, 0.005, 0.3, 0.01])
    truth_x0: list = field(default_factory=lambda: [-0.05, 0.001, 0.7, -0.055])
    n_steps: int = 20
    dump_epochs: list = field(default_factory=lambda: [1, 4, 7, 10, 13, 16, 19, 20])
    # particles written per ensemble per dumped epoch; 0 writes all of them
    dump_particles: int = 500
    sequential: SequentialSettings = field(default_factory=SequentialSettings)


_SCENARIO_TYPES = {
    "gamma-convergence": GammaScenario,
    "gamma-fuse": GammaScenario,
    "orbit-fusion": OrbitScenario,
    "bearings-sequential": BearingsScenarioConfig,
}

# (desk scale, full scale) top-level overrides per experiment
_SIZES = {
    "gamma-convergence": (
        {"n_trials": 100},
        {"n_trials": 1000, "scenario": {"n_values": [100, 1_000, 10_000, 100_000, 1_000_000]}},
    ),
    "gamma-fuse": ({"n_particles": 1_000_000}, {"n_particles": 1_000_000}),
    "orbit-fusion": ({"n_particles": 10_000, "n_trials": 5}, {"n_particles": 50_000, "n_trials": 5}),
    "bearings-sequential": ({"n_particles": 10_000}, {"n_particles": 10_000}),
}

_DEFAULT_SCHEME = {
    "gamma-convergence": ["apart", "together"],
    "gamma-fuse": ["apart", "together", "dm"],
    "orbit-fusion": "together",
    "bearings-sequential": "together",
}


@dataclass
class ExperimentConfig:
    experiment: str
    scheme: Union[str, list] = "together"
    n_particles: int = 10_000
    n_trials: int = 1
    seed: int = 0
    output_path: str = "crosspol_out.csv"
    # wall_ms is written as 0 when False so repeated runs are byte-identical
    record_timing: bool = True
    scenario: Any = None

    @property
    def schemes(self) -> list:
        return [self.scheme] if isinstance(self.scheme, str) else list(self.scheme)

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        for s in self.schemes:
            if s not in SCHEMES:
                raise ConfigError(f"unknown scheme {s!r}; choose from {SCHEMES}")
        if not self.schemes:
            raise ConfigError("at least one scheme is required")
        if self.experiment in ("orbit-fusion", "bearings-sequential"):
            if len(self.schemes) != 1:
                raise ConfigError(f"{self.experiment} takes a single scheme")
        if self.experiment == "bearings-sequential" and self.schemes[0] == "dm":
            raise ConfigError("bearings-sequential supports 'apart' and 'together' only")
        for name in ("n_particles", "n_trials"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        sc = self.scenario
        if isinstance(sc, GammaScenario):
            if not sc.n_values or any(int(n) < 1 for n in sc.n_values):
                raise ConfigError("n_values must be a non-empty list of positive integers")
            if sc.k0 <= 0 or sc.theta0 <= 0:
                raise ConfigError("k0 and theta0 must be positive")
            for pair in sc.obs:
                if len(pair) != 2 or pair[0] <= 0 or pair[1] <= 0:
                    raise ConfigError(f"observation {pair!r} must be [y > 0, k > 0]")
        elif isinstance(sc, BearingsScenarioConfig):
            if sc.n_steps < 1:
                raise ConfigError("n_steps must be >= 1")
            if sc.sigma_r <= 0 or sc.sigma_q < 0:
                raise ConfigError("need sigma_r > 0 and sigma_q >= 0")
            bad = [e for e in sc.dump_epochs if not 1 <= e <= sc.n_steps]
            if bad:
                raise ConfigError(f"dump_epochs {bad} fall outside 1..{sc.n_steps}")
            seq = sc.sequential
            if not 0 < seq.ess_threshold_fraction <= 1:
                raise ConfigError("ess_threshold_fraction must lie in (0, 1]")
            if seq.backward_order not in ("forward", "reverse"):
                raise ConfigError("backward_order must be 'forward' or 'reverse'")
            if seq.perturb_scope not in ("latest", "pending", "all"):
                raise ConfigError("perturb_scope must be 'latest', 'pending' or 'all'")
            if seq.perturb_bandwidth is not None and len(seq.perturb_bandwidth) != 4:
                raise ConfigError("perturb_bandwidth needs one value per state dimension (4)")
        elif isinstance(sc, OrbitScenario):
            if len(sc.truth_elements) != 6 or len(sc.leo_elements) != 6:
                raise ConfigError("orbital elements are [a, e, inc, raan, argp, nu]")
            if sc.sigma_leo_arcsec <= 0 or sc.sigma_ground_arcsec <= 0:
                raise ConfigError("sensor sigmas must be positive")
            if sc.noise_scale < 0:
                raise ConfigError("noise_scale must be >= 0")
        return self


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k == "sequential" and cls is BearingsScenarioConfig:
            v = _build(SequentialSettings, v, f"{where}.sequential")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict, full_scale: bool = False) -> ExperimentConfig:
    """Build a validated config, filling unspecified keys with experiment defaults.

    Values given explicitly in ``data`` always win over the desk- or
    full-scale defaults.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    exp = data.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}; choose from {EXPERIMENTS}")
    sizes = _SIZES[exp][1 if full_scale else 0]
    merged = _merge({"scheme": _DEFAULT_SCHEME[exp], "scenario": {}}, sizes)
    merged = _merge(merged, data)
    scenario = _build(_SCENARIO_TYPES[exp], merged.pop("scenario"), "scenario")
    cfg = _build(ExperimentConfig, {**merged, "scenario": None}, "config")
    cfg.scenario = scenario
    return cfg.validate()


def load_config(path, full_scale: bool = False) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(data, full_scale=full_scale)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
