"""Two-body orbits observed in right ascension / declination from a LEO sensor and a ground site.

Units are km, s and rad throughout; arcseconds appear only in scenario
configuration. Particles are 6-vectors ``(x, y, z, vx, vy, vz)`` at the
scenario epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..ensemble import as_generator
from ..errors import InvalidArgument, PropagationError
from ..fusion import LikelihoodTerm

MU_EARTH = 398600.4418  # km^3 / s^2
R_EARTH = 6378.137  # km
OMEGA_EARTH = 7.2921159e-5  # rad / s
ARCSEC = np.pi / (180.0 * 3600.0)
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class OrbitState:
    position: np.ndarray
    velocity: np.ndarray
    epoch: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)

    @property
    def rv(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_rv(cls, rv, epoch: float = 0.0) -> "OrbitState":
        rv = np.asarray(rv, dtype=float)
        return cls(rv[:3], rv[3:], epoch)

    def energy(self, mu: float = MU_EARTH) -> float:
        return float(self.velocity @ self.velocity / 2.0 - mu / np.linalg.norm(self.position))

    def angular_momentum(self) -> np.ndarray:
        return np.cross(self.position, self.velocity)


def elements_to_state(a, e, inc, raan, argp, nu, mu=MU_EARTH, epoch=0.0) -> OrbitState:
    """Classical elements (angles in rad) to inertial position and velocity."""
    p = a * (1.0 - e * e)
    r_pf = p / (1.0 + e * np.cos(nu)) * np.array([np.cos(nu), np.sin(nu), 0.0])
    v_pf = np.sqrt(mu / p) * np.array([-np.sin(nu), e + np.cos(nu), 0.0])
    cO, sO = np.cos(raan), np.sin(raan)
    ci, si = np.cos(inc), np.sin(inc)
    cw, sw = np.cos(argp), np.sin(argp)
    rot = np.array(
        [
            [cO * cw - sO * sw * ci, -cO * sw - sO * cw * ci, sO * si],
            [sO * cw + cO * sw * ci, -sO * sw + cO * cw * ci, -cO * si],
            [sw * si, cw * si, ci],
        ]
    )
    return OrbitState(rot @ r_pf, rot @ v_pf, epoch)


def propagate_rv(rv, dt, mu: float = MU_EARTH, tol: float = 1e-12, max_iter: int = 50):
    """Vectorized Kepler propagation of elliptical orbits by ``dt`` seconds.

    Solves Kepler's equation in eccentric-anomaly-difference form by Newton's
    method and maps the state with the Lagrange f and g coefficients.

    Args:
        rv: ``(6,)`` or ``(N, 6)`` states.
        dt: scalar time step (may be negative).

    Returns:
        ``(rv_out, ok)``: propagated states and a boolean mask that is False for
        unbound orbits and for rows whose Newton iteration did not converge.
        Rows with ``ok`` False are filled with NaN.
    """
    rv = np.asarray(rv, dtype=float)
    single = rv.ndim == 1
    rv = np.atleast_2d(rv)
    r0v, v0v = rv[:, :3], rv[:, 3:]
    r0 = np.linalg.norm(r0v, axis=1)
    v0sq = np.einsum("ij,ij->i", v0v, v0v)
    alpha = 2.0 / r0 - v0sq / mu
    bound = alpha > 0
    out = np.full_like(rv, np.nan)
    ok = bound.copy()
    if dt == 0:
        out[bound] = rv[bound]
    elif bound.any():
        # Extended precision where the platform has it: 2/r0 - v^2/mu cancels
        # badly near perigee of eccentric orbits, and the resulting error in
        # the mean motion grows with every revolution of dt.
        rb = rv[bound, :3].astype(np.longdouble)
        vb = rv[bound, 3:].astype(np.longdouble)
        mu_l = np.longdouble(mu)
        r0b = np.sqrt(np.einsum("ij,ij->i", rb, rb))
        alph = 2.0 / r0b - np.einsum("ij,ij->i", vb, vb) / mu_l
        a = 1.0 / alph
        sqrt_a = np.sqrt(a)
        sigma0 = np.einsum("ij,ij->i", rb, vb) / np.sqrt(mu_l)
        n = np.sqrt(mu_l * alph**3)
        mean_anom = n * np.longdouble(dt)
        two_pi = 2 * np.arccos(np.longdouble(-1.0))
        revs = np.round(mean_anom / two_pi)
        m_red = mean_anom - two_pi * revs
        c1 = sigma0 / sqrt_a  # e sin E0
        c2 = 1.0 - r0b / a  # e cos E0
        E = m_red.copy()
        conv = np.zeros(E.shape, dtype=bool)
        for _ in range(max_iter):
            sE, cE = np.sin(E), np.cos(E)
            F = E + c1 * (1.0 - cE) - c2 * sE - m_red
            conv = np.abs(F) < tol
            # always take the step: once |F| < tol one more Newton update
            # brings E to machine precision, which the round trip needs
            E = E - F / (1.0 + c1 * sE - c2 * cE)
            if conv.all():
                break
        else:
            sE, cE = np.sin(E), np.cos(E)
            F = E + c1 * (1.0 - cE) - c2 * sE - m_red
            conv = np.abs(F) < tol
        sE, cE = np.sin(E), np.cos(E)
        r = a + (r0b - a) * cE + sigma0 * sqrt_a * sE
        f = 1.0 - a / r0b * (1.0 - cE)
        g = (m_red - E + sE) / n
        fdot = -np.sqrt(mu * a) * sE / (r * r0b)
        gdot = 1.0 - a / r * (1.0 - cE)
        res = np.empty((rb.shape[0], 6))
        res[:, :3] = f[:, None] * rb + g[:, None] * vb
        res[:, 3:] = fdot[:, None] * rb + gdot[:, None] * vb
        res[~conv] = np.nan
        out[bound] = res
        ok[bound] = conv
    if single:
        return out[0], bool(ok[0])
    return out, ok


def kepler_propagate(s: OrbitState, dt: float, mu: float = MU_EARTH) -> OrbitState:
    """Propagate one state; raises instead of flagging failures."""
    if mu <= 0:
        raise InvalidArgument("mu must be positive")
    if s.energy(mu) >= 0:
        raise InvalidArgument("orbit is not bound (specific energy >= 0)")
    rv, ok = propagate_rv(s.rv, dt, mu)
    if not ok:
        raise PropagationError(f"Kepler iteration did not converge for dt={dt}")
    return OrbitState.from_rv(rv, s.epoch + dt)


@dataclass
class Observer:
    """Either a satellite (``kind='leo'``, with ``orbit``) or a site on a spherical rotating Earth."""

    kind: str
    orbit: Optional[OrbitState] = None
    lat: float = 0.0
    lon: float = 0.0
    omega: float = OMEGA_EARTH
    radius: float = R_EARTH
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("leo", "ground"):
            raise InvalidArgument(f"unknown observer kind {self.kind!r}")
        if self.kind == "leo" and self.orbit is None:
            raise InvalidArgument("a LEO observer needs an orbit")


def observer_position(obs: Observer, t: float, mu: float = MU_EARTH) -> np.ndarray:
    """Inertial position (km) of ``obs`` at time ``t``."""
    if obs.kind == "leo":
        return kepler_propagate(obs.orbit, t - obs.orbit.epoch, mu).position
    theta = obs.lon + obs.omega * t
    cl = np.cos(obs.lat)
    return obs.radius * np.array([cl * np.cos(theta), cl * np.sin(theta), np.sin(obs.lat)])


def radec_from_geometry(target_pos, observer_pos):
    """Topocentric right ascension in ``(-pi, pi]`` and declination in ``[-pi/2, pi/2]``."""
    d = np.asarray(target_pos, dtype=float) - np.asarray(observer_pos, dtype=float)
    rng_ = np.linalg.norm(d, axis=-1)
    if np.any(rng_ == 0):
        raise InvalidArgument("target and observer coincide")
    ra = np.arctan2(d[..., 1], d[..., 0])
    dec = np.arcsin(np.clip(d[..., 2] / rng_, -1.0, 1.0))
    if np.ndim(ra) == 0:
        return float(ra), float(dec)
    return ra, dec


def wrap_angle(a):
    a = np.asarray(a, dtype=float)
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


@dataclass
class RadecObs:
    ra: float
    dec: float
    time: float
    sigma: float
    observer: Observer

    def __post_init__(self):
        if self.sigma <= 0:
            raise InvalidArgument("sigma must be positive")
        if not -np.pi / 2 <= self.dec <= np.pi / 2:
            raise InvalidArgument("declination out of range")


def radec_log_likelihood(particles, obs: RadecObs, mu: float = MU_EARTH, epoch: float = 0.0):
    """Bivariate Gaussian log-density of the predicted RA/DEC about the observation.

    The RA residual is wrapped to ``(-pi, pi]``; no ``cos(dec)`` metric factor
    is applied. Particles that cannot be propagated get ``-inf``.

    Args:
        particles: ``OrbitState``, ``(6,)`` or ``(N, 6)`` states at ``epoch``.

    Returns:
        Log-likelihoods, and the number of particles that failed to propagate.
    """
    if isinstance(particles, OrbitState):
        epoch = particles.epoch
        particles = particles.rv
    x = np.atleast_2d(np.asarray(particles, dtype=float))
    rv, ok = propagate_rv(x, obs.time - epoch, mu)
    site = observer_position(obs.observer, obs.time, mu)
    out = np.full(x.shape[0], -np.inf)
    if ok.any():
        ra, dec = radec_from_geometry(rv[ok, :3], site)
        dra = wrap_angle(ra - obs.ra)
        ddec = dec - obs.dec
        out[ok] = -0.5 * (dra**2 + ddec**2) / obs.sigma**2 - LOG_2PI - 2.0 * np.log(obs.sigma)
    n_fail = int((~ok).sum())
    if np.ndim(particles) == 1:
        return float(out[0]), n_fail
    return out, n_fail


class _RadecEvaluator:
    def __init__(self, obs: RadecObs, epoch: float, mu: float):
        self.obs, self.epoch, self.mu = obs, epoch, mu
        self.failures = 0

    def __call__(self, particles: np.ndarray) -> np.ndarray:
        ll, n_fail = radec_log_likelihood(particles, self.obs, self.mu, self.epoch)
        self.failures += n_fail
        return ll


def radec_likelihood_term(obs: RadecObs, epoch: float = 0.0, mu: float = MU_EARTH, label: str = "") -> LikelihoodTerm:
    """Likelihood term whose ``evaluate.failures`` counts propagation failures."""
    name = obs.observer.name or obs.observer.kind
    return LikelihoodTerm(_RadecEvaluator(obs, epoch, mu), label or f"sensor={name}, t={obs.time:g}")


def simulate_scenario(
    truth: OrbitState, schedule: Sequence, rng, mu: float = MU_EARTH, noise_scale: float = 1.0
) -> list[RadecObs]:
    """Noisy RA/DEC observations of ``truth`` for each ``(time, observer, sigma)`` in ``schedule``.

    Each component gets Gaussian noise of standard deviation
    ``noise_scale * sigma``; ``noise_scale=0`` yields exact geometric angles
    while the observations keep ``sigma`` as their likelihood width.
    """
    rng = as_generator(rng)
    out = []
    for t, observer, sigma in schedule:
        if t < truth.epoch:
            raise InvalidArgument("observation time precedes the truth epoch")
        pos = kepler_propagate(truth, t - truth.epoch, mu).position
        ra, dec = radec_from_geometry(pos, observer_position(observer, t, mu))
        noise = rng.standard_normal(2) * sigma * noise_scale
        ra = float(wrap_angle(ra + noise[0]))
        dec = float(np.clip(dec + noise[1], -np.pi / 2, np.pi / 2))
        out.append(RadecObs(ra, dec, float(t), float(sigma), observer))
    return out


@dataclass
class OrbitScenario:
    """Geometry and sensor settings for the two-sensor orbit-fusion problem.

    Angles are in degrees and sigmas in arcseconds here; everything is
    converted to radians when the scenario is built.
    """

    mu: float = MU_EARTH
    # a (km), e, inc, raan, argp, true anomaly (deg) at t = 0
    truth_elements: list = field(default_factory=lambda: [7000.0, 0.05, 45.0, 135.0, 30.0, 45.0])
    leo_elements: list = field(default_factory=lambda: [6800.0, 0.0, 30.0, 130.0, 0.0, 80.0])
    ground_lat_deg: float = 35.0
    ground_lon_deg: float = -105.0
    leo_times: list = field(default_factory=lambda: [0.0, 90.0, 180.0])
    ground_times: list = field(default_factory=lambda: [540.0, 660.0, 780.0])
    sigma_leo_arcsec: float = 2.0
    sigma_ground_arcsec: float = 20.0
    noise_scale: float = 1.0
    # common Gaussian prior; its mean is the truth displaced by one draw from itself
    prior_pos_sd_km: float = 100.0
    prior_vel_sd_km_s: float = 0.1
    mcmc_chains: int = 50
    mcmc_burn_in: int = 300
    mcmc_thin: int = 5
    perturb_pos_km: float = 0.5
    perturb_vel_km_s: float = 0.0005
    n_plot_orbits: int = 450
    plot_points: int = 120

    def truth(self) -> OrbitState:
        return _elements_deg(self.truth_elements, self.mu)

    def observers(self) -> tuple[Observer, Observer]:
        leo = Observer("leo", orbit=_elements_deg(self.leo_elements, self.mu), name="leo")
        ground = Observer(
            "ground", lat=np.radians(self.ground_lat_deg), lon=np.radians(self.ground_lon_deg), name="ground"
        )
        return leo, ground

    def schedules(self) -> tuple[list, list]:
        leo, ground = self.observers()
        return (
            [(t, leo, self.sigma_leo_arcsec * ARCSEC) for t in self.leo_times],
            [(t, ground, self.sigma_ground_arcsec * ARCSEC) for t in self.ground_times],
        )

    @property
    def prior_sd(self) -> np.ndarray:
        return np.array([self.prior_pos_sd_km] * 3 + [self.prior_vel_sd_km_s] * 3)

    @property
    def perturb_bandwidth(self) -> np.ndarray:
        return np.array([self.perturb_pos_km] * 3 + [self.perturb_vel_km_s] * 3)


def _elements_deg(el, mu) -> OrbitState:
    a, e, inc, raan, argp, nu = el
    return elements_to_state(a, e, *np.radians([inc, raan, argp, nu]), mu=mu)


def _radec_residuals(x: np.ndarray, obs: Sequence[RadecObs], mu: float) -> np.ndarray:
    out = []
    for o in obs:
        rv, ok = propagate_rv(x, o.time, mu)
        if not ok:
            out.append(np.full(2, 1e6))
            continue
        ra, dec = radec_from_geometry(rv[:3], observer_position(o.observer, o.time, mu))
        out.append(np.array([wrap_angle(ra - o.ra), dec - o.dec]) / o.sigma)
    return np.concatenate(out)


def mcmc_orbit_ensemble(
    obs: Sequence[RadecObs],
    prior_mean,
    prior_sd,
    n: int,
    rng,
    chains: int = 50,
    burn_in: int = 300,
    thin: int = 5,
    mu: float = MU_EARTH,
):
    """Posterior orbit samples at t = 0 from one sensor's observations.

    Random-walk Metropolis runs in whitened coordinates: the maximum a
    posteriori orbit is found by least squares and the chains move in
    ``z`` with ``x = x_map + L z``, ``L`` the Cholesky factor of the
    Gauss-Newton covariance. The proposal scale is ``2.4 / sqrt(6)`` in every
    whitened direction.

    Returns:
        ``(ensemble, acceptance_rate)``.
    """
    from scipy.optimize import least_squares

    from ..ensemble import WeightedEnsemble
    from ..samplers import random_walk_metropolis

    rng = as_generator(rng)
    prior_mean = np.asarray(prior_mean, dtype=float)
    prior_sd = np.asarray(prior_sd, dtype=float)
    terms = [radec_likelihood_term(o, 0.0, mu) for o in obs]

    def resid(x):
        return np.concatenate([(x - prior_mean) / prior_sd, _radec_residuals(x, obs, mu)])

    sol = least_squares(resid, prior_mean, x_scale=prior_sd, method="lm")
    jtj = sol.jac.T @ sol.jac
    chol = np.linalg.cholesky(np.linalg.inv(jtj))

    def log_target(z):
        x = sol.x + z @ chol.T
        lp = -0.5 * (((x - prior_mean) / prior_sd) ** 2).sum(axis=1)
        for t in terms:
            lp = lp + t(x)
        return lp

    n_chains = chains
    while n % n_chains:
        n_chains -= 1
    z0 = rng.standard_normal((n_chains, 6))
    ens, rate = random_walk_metropolis(log_target, z0, 2.4 / np.sqrt(6.0), n, burn_in, thin, rng)
    return WeightedEnsemble.uniform(sol.x + ens.particles @ chol.T), rate
