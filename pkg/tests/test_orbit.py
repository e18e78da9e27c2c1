import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from crosspol.config import config_from_dict
from crosspol.errors import InvalidArgument
from crosspol.experiments import orbit_trial, run_orbit_fusion
from crosspol.models import orbit as orb

MU = orb.MU_EARTH


def circular(r=7000.0):
    return orb.OrbitState([r, 0.0, 0.0], [0.0, np.sqrt(MU / r), 0.0])


def period(s: orb.OrbitState) -> float:
    a = -MU / (2.0 * s.energy(MU))
    return 2.0 * np.pi * np.sqrt(a**3 / MU)


elements = st.tuples(
    st.floats(6700.0, 30000.0),  # a
    st.floats(0.0, 0.7),  # e
    st.floats(0.0, np.pi),  # inc
    st.floats(0.0, 2 * np.pi),  # raan
    st.floats(0.0, 2 * np.pi),  # argp
    st.floats(0.0, 2 * np.pi),  # nu
)


# --- propagation ---------------------------------------------------------------


def test_zero_dt_is_identity():
    s = orb.elements_to_state(8000.0, 0.1, 0.3, 1.0, 2.0, 0.5)
    out = orb.kepler_propagate(s, 0.0)
    np.testing.assert_array_equal(out.rv, s.rv)


def test_quarter_period_circular():
    s = circular()
    quarter = np.pi / 2 * np.sqrt(7000.0**3 / MU)
    out = orb.kepler_propagate(s, quarter)
    np.testing.assert_allclose(out.position, [0.0, 7000.0, 0.0], atol=1e-6)
    assert out.epoch == pytest.approx(quarter)


@settings(max_examples=500, deadline=None)
@given(elements, st.floats(-20000.0, 20000.0))
def test_forward_then_back(el, dt):
    s = orb.elements_to_state(*el)
    back = orb.kepler_propagate(orb.kepler_propagate(s, dt), -dt)
    np.testing.assert_allclose(back.position, s.position, rtol=0, atol=1e-9)
    np.testing.assert_allclose(back.velocity, s.velocity, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(elements, st.floats(0.0, 10.0))
def test_energy_and_momentum_conserved(el, n_periods):
    s = orb.elements_to_state(*el)
    out = orb.kepler_propagate(s, n_periods * period(s))
    assert out.energy() == pytest.approx(s.energy(), rel=1e-9)
    np.testing.assert_allclose(out.angular_momentum(), s.angular_momentum(), rtol=1e-9, atol=1e-9 * np.linalg.norm(s.angular_momentum()))


def test_matches_numerical_integration():
    s = orb.elements_to_state(9000.0, 0.3, 0.7, 0.4, 1.1, 2.0)

    def two_body(_, y):
        r = y[:3]
        return np.concatenate([y[3:], -MU * r / np.linalg.norm(r) ** 3])

    dt = 0.7 * period(s)
    sol = solve_ivp(two_body, (0.0, dt), s.rv, method="DOP853", rtol=1e-12, atol=1e-9)
    out = orb.kepler_propagate(s, dt)
    np.testing.assert_allclose(out.position, sol.y[:3, -1], atol=1e-4)
    np.testing.assert_allclose(out.velocity, sol.y[3:, -1], atol=1e-7)


def test_full_period_returns_home():
    s = orb.elements_to_state(12000.0, 0.5, 1.0, 0.0, 0.0, 0.3)
    out = orb.kepler_propagate(s, 3 * period(s))
    np.testing.assert_allclose(out.position, s.position, atol=1e-6)


def test_unbound_orbit_rejected():
    s = orb.OrbitState([7000.0, 0.0, 0.0], [0.0, 12.0, 0.0])
    with pytest.raises(InvalidArgument):
        orb.kepler_propagate(s, 10.0)


def test_vectorized_flags_unbound_rows():
    rv = np.stack([circular().rv, [7000.0, 0.0, 0.0, 0.0, 12.0, 0.0]])
    out, ok = orb.propagate_rv(rv, 100.0)
    assert ok.tolist() == [True, False]
    assert np.isnan(out[1]).all() and np.isfinite(out[0]).all()


# --- RA/DEC geometry -----------------------------------------------------------


def test_radec_along_x():
    assert orb.radec_from_geometry([1.0, 0.0, 0.0], [0.0, 0.0, 0.0]) == (0.0, 0.0)


def test_radec_pole():
    ra, dec = orb.radec_from_geometry([0.0, 0.0, 5.0], np.zeros(3))
    assert ra == 0.0 and dec == pytest.approx(np.pi / 2)


def test_radec_diagonal():
    ra, dec = orb.radec_from_geometry([1.0, 1.0, np.sqrt(2.0)], np.zeros(3))
    assert ra == pytest.approx(np.pi / 4) and dec == pytest.approx(np.pi / 4)


def test_radec_coincident():
    with pytest.raises(InvalidArgument):
        orb.radec_from_geometry([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


# --- observers -----------------------------------------------------------------


def test_ground_site_at_origin():
    site = orb.Observer("ground", lat=0.0, lon=0.0)
    np.testing.assert_allclose(orb.observer_position(site, 0.0), [orb.R_EARTH, 0.0, 0.0])


def test_ground_site_sidereal_period():
    site = orb.Observer("ground", lat=0.6, lon=-1.8)
    day = 2 * np.pi / orb.OMEGA_EARTH
    np.testing.assert_allclose(orb.observer_position(site, day), orb.observer_position(site, 0.0), atol=1e-6)


def test_leo_observer_at_its_epoch():
    s = orb.elements_to_state(6800.0, 0.0, 0.5, 0.1, 0.0, 1.0)
    np.testing.assert_array_equal(orb.observer_position(orb.Observer("leo", orbit=s), 0.0), s.position)


def test_observer_validation():
    with pytest.raises(InvalidArgument):
        orb.Observer("balloon")
    with pytest.raises(InvalidArgument):
        orb.Observer("leo")


# --- likelihood ------------------------------------------------------------------


def exact_obs(truth, t, site, sigma):
    pos = orb.kepler_propagate(truth, t).position
    ra, dec = orb.radec_from_geometry(pos, orb.observer_position(site, t))
    return orb.RadecObs(ra, dec, t, sigma, site)


SITE = orb.Observer("ground", lat=0.6, lon=-1.8)
TRUTH = orb.elements_to_state(7000.0, 0.05, 0.8, 2.4, 0.5, 0.8)


def test_likelihood_at_mode():
    o = exact_obs(TRUTH, 60.0, SITE, 1e-4)
    ll, fails = orb.radec_log_likelihood(TRUTH, o)
    assert ll == pytest.approx(-np.log(2 * np.pi * 1e-8), rel=1e-9)
    assert fails == 0


def test_likelihood_one_sigma_in_ra():
    o = exact_obs(TRUTH, 60.0, SITE, 1e-4)
    shifted = orb.RadecObs(o.ra + 1e-4, o.dec, o.time, o.sigma, SITE)
    mode, _ = orb.radec_log_likelihood(TRUTH, o)
    ll, _ = orb.radec_log_likelihood(TRUTH, shifted)
    assert ll == pytest.approx(mode - 0.5, abs=1e-6)


@settings(max_examples=200)
@given(st.floats(1e-6, 0.3))
def test_likelihood_wraps_ra(eps):
    o = exact_obs(TRUTH, 60.0, SITE, 0.05)
    a = orb.RadecObs(float(orb.wrap_angle(o.ra + eps)), o.dec, o.time, o.sigma, SITE)
    b = orb.RadecObs(float(orb.wrap_angle(o.ra - eps + 2 * np.pi)), o.dec, o.time, o.sigma, SITE)
    c = orb.RadecObs(float(orb.wrap_angle(o.ra - eps)), o.dec, o.time, o.sigma, SITE)
    la, lb, lc = (orb.radec_log_likelihood(TRUTH, x)[0] for x in (a, b, c))
    # symmetric in the sign of the residual and blind to a full turn
    assert la == pytest.approx(lc, abs=1e-6)
    assert lb == pytest.approx(lc, abs=1e-9)
    mode = orb.radec_log_likelihood(TRUTH, o)[0]
    assert la < mode


def test_likelihood_counts_failures():
    term = orb.radec_likelihood_term(exact_obs(TRUTH, 60.0, SITE, 1e-3))
    bad = np.array([[7000.0, 0.0, 0.0, 0.0, 12.0, 0.0], TRUTH.rv])
    ll = term(bad)
    assert ll[0] == -np.inf and np.isfinite(ll[1])
    assert term.evaluate.failures == 1


def test_radec_obs_validation():
    with pytest.raises(InvalidArgument):
        orb.RadecObs(0.0, 0.0, 0.0, 0.0, SITE)
    with pytest.raises(InvalidArgument):
        orb.RadecObs(0.0, 2.0, 0.0, 1.0, SITE)


# --- scenario --------------------------------------------------------------------


def test_noiseless_simulation_matches_geometry():
    sc = orb.OrbitScenario()
    leo_sched, ground_sched = sc.schedules()
    truth = sc.truth()
    obs = orb.simulate_scenario(truth, leo_sched + ground_sched, np.random.default_rng(0), noise_scale=0.0)
    for o in obs:
        pos = orb.kepler_propagate(truth, o.time).position
        ra, dec = orb.radec_from_geometry(pos, orb.observer_position(o.observer, o.time))
        assert abs(orb.wrap_angle(ra - o.ra)) < 1e-12 and abs(dec - o.dec) < 1e-12


def test_scenario_cadence():
    sc = orb.OrbitScenario()
    assert len(sc.leo_times) == 3 and sc.leo_times[-1] - sc.leo_times[0] == 180.0
    assert sc.ground_times[0] - sc.leo_times[-1] == 360.0
    assert len(sc.ground_times) == 3 and sc.ground_times[-1] - sc.ground_times[0] == 240.0
    assert sc.sigma_leo_arcsec == 2.0 and sc.sigma_ground_arcsec == 20.0


def test_scenario_geometry_is_valid():
    sc = orb.OrbitScenario()
    truth = sc.truth()
    assert np.linalg.norm(truth.position) > orb.R_EARTH and truth.energy() < 0
    leo, ground = sc.observers()
    for t in sc.ground_times:
        # target above the ground site's horizon
        site = orb.observer_position(ground, t)
        los = orb.kepler_propagate(truth, t).position - site
        assert los @ site > 0


def test_simulation_repeatable():
    sc = orb.OrbitScenario()
    sched = sum(sc.schedules(), [])
    a = orb.simulate_scenario(sc.truth(), sched, np.random.default_rng(3))
    b = orb.simulate_scenario(sc.truth(), sched, np.random.default_rng(3))
    assert [(o.ra, o.dec) for o in a] == [(o.ra, o.dec) for o in b]


def test_simulation_rejects_past_times():
    sc = orb.OrbitScenario()
    leo, _ = sc.observers()
    with pytest.raises(InvalidArgument):
        orb.simulate_scenario(sc.truth(), [(-5.0, leo, 1e-5)], np.random.default_rng(0))


def test_noiseless_fusion_is_tight():
    sc = orb.OrbitScenario(noise_scale=0.0, perturb_pos_km=0.01, perturb_vel_km_s=1e-5)
    res = orbit_trial(sc, 4000, "together", np.random.default_rng(0))
    assert res["rmse"]["fused"]["position_km"] < 1.0


def test_orbit_summary_repeatable(tmp_path):
    def run(name):
        cfg = config_from_dict(
            {
                "experiment": "orbit-fusion",
                "n_particles": 500,
                "n_trials": 1,
                "output_path": str(tmp_path / name / "orbit.csv"),
                "scenario": {"mcmc_chains": 10, "mcmc_burn_in": 50, "n_plot_orbits": 5, "plot_points": 8},
            }
        )
        run_orbit_fusion(cfg)
        return (tmp_path / name / "orbit_summary.json").read_text()

    a, b = run("a"), run("b")
    assert a == b
    s = json.loads(a)
    assert set(s["trials"][0]["rmse"]) == {"leo", "ground", "fused"}
    assert (tmp_path / "a" / "orbit_orbits.csv").exists()
