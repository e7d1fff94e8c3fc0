import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from skysweep.astro import (
    MU_EARTH,
    OMEGA_EARTH,
    R_EARTH,
    DegenerateGeometry,
    Epoch,
    KeplerianElements,
    NonEllipticalOrbit,
    ObserverSite,
    StateVector,
    cartesian_to_kepler,
    kepler_to_cartesian,
    measure_radec,
    measurement_jacobian,
    propagate_two_body,
    site_state,
    wrap_angle,
    wrap_angle_diff,
)

CASE2_ELEMENTS = KeplerianElements(
    a=42259.0,
    e=0.001,
    i=math.radians(5.0),
    raan=math.radians(0.001),
    argp=math.radians(0.001),
    true_anomaly=math.radians(135.0),
)


def two_body_rk_oracle(state: np.ndarray, dt: float) -> np.ndarray:
    """High-order numerical integration of the two-body ODE."""

    def rhs(_, y):
        r = y[:3]
        rn = np.linalg.norm(r)
        return np.concatenate([y[3:], -MU_EARTH * r / rn**3])

    sol = solve_ivp(rhs, (0.0, dt), state, method="DOP853", rtol=1e-12, atol=1e-9)
    return sol.y[:, -1]


def elements_oracle(r, v, mu=MU_EARTH):
    """Independent textbook conversion via the eccentricity vector."""
    r = np.asarray(r, float)
    v = np.asarray(v, float)
    rn = np.linalg.norm(r)
    h = np.cross(r, v)
    e_vec = (np.cross(v, h) / mu) - r / rn
    a = 1.0 / (2.0 / rn - v @ v / mu)
    return a, np.linalg.norm(e_vec), e_vec


class TestKeplerToCartesian:
    def test_circular_equatorial(self):
        el = KeplerianElements(a=42164.0, e=0.0, i=0.0, raan=0.0, argp=0.0, true_anomaly=0.0)
        sv = kepler_to_cartesian(el)
        np.testing.assert_allclose(sv.position, [42164.0, 0.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(
            sv.velocity, [0.0, math.sqrt(MU_EARTH / 42164.0), 0.0], atol=1e-12
        )

    def test_case2_conic_radius(self):
        sv = kepler_to_cartesian(CASE2_ELEMENTS)
        el = CASE2_ELEMENTS
        r_conic = el.a * (1 - el.e**2) / (1 + el.e * math.cos(el.true_anomaly))
        assert np.linalg.norm(sv.position) == pytest.approx(r_conic, rel=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            el = KeplerianElements(
                a=rng.uniform(8000, 50000),
                e=rng.uniform(0.01, 0.85),
                i=rng.uniform(0.01, math.pi - 0.01),
                raan=rng.uniform(0, 2 * math.pi),
                argp=rng.uniform(0, 2 * math.pi),
                true_anomaly=rng.uniform(0, 2 * math.pi),
            )
            back = cartesian_to_kepler(kepler_to_cartesian(el))
            assert back.a == pytest.approx(el.a, rel=1e-9)
            assert back.e == pytest.approx(el.e, abs=1e-9)
            assert back.i == pytest.approx(el.i, abs=1e-9)
            for got, want in [
                (back.raan, el.raan),
                (back.argp, el.argp),
                (back.true_anomaly, el.true_anomaly),
            ]:
                assert abs(wrap_angle_diff(got - want)) < 1e-8

    def test_rejects_hyperbolic(self):
        with pytest.raises(NonEllipticalOrbit):
            kepler_to_cartesian(
                KeplerianElements(a=10000, e=1.2, i=0, raan=0, argp=0, true_anomaly=0)
            )

    def test_specific_energy_postcondition(self):
        sv = kepler_to_cartesian(CASE2_ELEMENTS)
        energy = sv.velocity @ sv.velocity / 2 - MU_EARTH / np.linalg.norm(sv.position)
        assert energy == pytest.approx(-MU_EARTH / (2 * CASE2_ELEMENTS.a), rel=1e-10)


class TestCartesianToKepler:
    def test_circular_equatorial_conventions(self):
        sv = StateVector([42164.0, 0.0, 0.0], [0.0, math.sqrt(MU_EARTH / 42164.0), 0.0])
        el = cartesian_to_kepler(sv)
        assert el.a == pytest.approx(42164.0, rel=1e-12)
        assert el.e == 0.0
        assert el.i == 0.0
        assert el.raan == 0.0 and el.argp == 0.0
        assert el.true_anomaly == pytest.approx(0.0, abs=1e-12)

    def test_vis_viva_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a_true = rng.uniform(9000, 45000)
            r = rng.uniform(0.5, 1.5) * a_true
            v = math.sqrt(MU_EARTH * (2 / r - 1 / a_true))
            # velocity direction chosen non-radial so the orbit is well defined
            sv = StateVector([r, 0.0, 0.0], [0.2 * v, 0.8 * v, v * math.sqrt(1 - 0.68)])
            el = cartesian_to_kepler(sv)
            if el.e < 1.0:
                assert el.a == pytest.approx(a_true, rel=1e-9)

    def test_matches_eccentricity_vector_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            el = KeplerianElements(
                a=rng.uniform(8000, 50000),
                e=rng.uniform(0.0, 0.9),
                i=rng.uniform(0, math.pi),
                raan=rng.uniform(0, 2 * math.pi),
                argp=rng.uniform(0, 2 * math.pi),
                true_anomaly=rng.uniform(0, 2 * math.pi),
            )
            sv = kepler_to_cartesian(el)
            a_o, e_o, _ = elements_oracle(sv.position, sv.velocity)
            got = cartesian_to_kepler(sv)
            assert got.a == pytest.approx(a_o, rel=1e-9)
            assert got.e == pytest.approx(e_o, abs=1e-9)

    def test_degenerate_rectilinear(self):
        from skysweep.astro import DegenerateOrbit

        with pytest.raises(DegenerateOrbit):
            cartesian_to_kepler(StateVector([10000, 0, 0], [1.0, 0, 0]))


class TestPropagateTwoBody:
    def test_full_period_circular(self):
        a = 42164.0
        sv = StateVector([a, 0, 0], [0, math.sqrt(MU_EARTH / a), 0])
        period = 2 * math.pi * math.sqrt(a**3 / MU_EARTH)
        out = propagate_two_body(sv, period)
        np.testing.assert_allclose(out.position, sv.position, atol=1e-6)
        np.testing.assert_allclose(out.velocity, sv.velocity, atol=1e-9)

    def test_circular_mean_anomaly_advance(self):
        a = 20000.0
        sv = StateVector([a, 0, 0], [0, math.sqrt(MU_EARTH / a), 0])
        M = 1.234
        dt = M / math.sqrt(MU_EARTH / a**3)
        out = propagate_two_body(sv, dt)
        # circular orbit: true anomaly advance equals the mean anomaly advance
        ang = math.atan2(out.position[1], out.position[0])
        assert ang == pytest.approx(M, abs=1e-10)

    def test_matches_rk_oracle_case1_eccentricity(self):
        el = KeplerianElements(
            a=25447.5, e=0.66, i=math.radians(1.0), raan=0.0, argp=0.0,
            true_anomaly=math.radians(240.0),
        )
        sv = kepler_to_cartesian(el)
        rng = np.random.default_rng(5)
        for dt in rng.uniform(-20000, 20000, size=5):
            got = propagate_two_body(sv, float(dt)).as_array()
            want = two_body_rk_oracle(sv.as_array(), float(dt))
            np.testing.assert_allclose(got[:3], want[:3], atol=1e-6)
            np.testing.assert_allclose(got[3:], want[3:], atol=1e-9)

    def test_energy_momentum_conservation_and_reversibility(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            el = KeplerianElements(
                a=rng.uniform(8000, 45000),
                e=rng.uniform(0, 0.8),
                i=rng.uniform(0, math.pi),
                raan=rng.uniform(0, 2 * math.pi),
                argp=rng.uniform(0, 2 * math.pi),
                true_anomaly=rng.uniform(0, 2 * math.pi),
            )
            sv = kepler_to_cartesian(el)
            dt = float(rng.uniform(-90000, 90000))
            out = propagate_two_body(sv, dt)

            def energy(s):
                return s.velocity @ s.velocity / 2 - MU_EARTH / np.linalg.norm(s.position)

            def hmag(s):
                return np.linalg.norm(np.cross(s.position, s.velocity))

            assert energy(out) == pytest.approx(energy(sv), rel=1e-9)
            assert hmag(out) == pytest.approx(hmag(sv), rel=1e-9)
            back = propagate_two_body(out, -dt)
            np.testing.assert_allclose(back.position, sv.position, atol=1e-8 * np.linalg.norm(sv.position))

    def test_rejects_non_elliptical(self):
        sv = StateVector([7000, 0, 0], [0, 12.0, 0])  # above escape speed
        with pytest.raises(NonEllipticalOrbit):
            propagate_two_body(sv, 100.0)


class TestUniversalPropagation:
    def test_agrees_with_elliptic_path(self):
        from skysweep.astro import propagate_states, propagate_states_universal

        rng = np.random.default_rng(13)
        states = []
        for _ in range(30):
            el = KeplerianElements(
                a=rng.uniform(8000, 45000), e=rng.uniform(0, 0.8),
                i=rng.uniform(0, math.pi), raan=rng.uniform(0, 2 * math.pi),
                argp=rng.uniform(0, 2 * math.pi), true_anomaly=rng.uniform(0, 2 * math.pi),
            )
            states.append(kepler_to_cartesian(el).as_array())
        states = np.array(states)
        dt = rng.uniform(-30000, 30000, size=30)
        a = propagate_states(states, dt)
        b = propagate_states_universal(states, dt)
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-6)

    def test_hyperbolic_matches_rk_oracle(self):
        from skysweep.astro import propagate_states_universal

        rng = np.random.default_rng(17)
        for _ in range(10):
            r = rng.uniform(20000, 60000)
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            w = rng.normal(size=3)
            w -= (w @ u) * u
            w /= np.linalg.norm(w)
            v_esc = math.sqrt(2 * MU_EARTH / r)
            speed = v_esc * rng.uniform(1.02, 1.3)
            state = np.concatenate([r * u, speed * (0.9 * w + 0.1 * u) / np.linalg.norm(0.9 * w + 0.1 * u)])
            dt = float(rng.uniform(-5000, 5000))
            got = propagate_states_universal(state[None, :], dt)[0]
            want = two_body_rk_oracle(state, dt)
            np.testing.assert_allclose(got[:3], want[:3], atol=2e-5)
            np.testing.assert_allclose(got[3:], want[3:], atol=1e-8)

    def test_mixed_batch_routing(self):
        from skysweep.astro import propagate_states_any

        ell = kepler_to_cartesian(CASE2_ELEMENTS).as_array()
        hyp = np.array([30000.0, 0, 0, 0, 6.0, 0])  # above escape at r=30000
        out = propagate_states_any(np.stack([ell, hyp]), 600.0)
        want0 = two_body_rk_oracle(ell, 600.0)
        want1 = two_body_rk_oracle(hyp, 600.0)
        np.testing.assert_allclose(out[0], want0, atol=2e-5)
        np.testing.assert_allclose(out[1], want1, atol=2e-5)


class TestSiteState:
    def test_equatorial_reference_alignment(self):
        sv = site_state(ObserverSite(0.0, 0.0, 0.0), Epoch(0.0))
        np.testing.assert_allclose(sv.position, [R_EARTH, 0, 0], atol=1e-12)
        np.testing.assert_allclose(sv.velocity, [0, OMEGA_EARTH * R_EARTH, 0], atol=1e-15)

    def test_pole_has_zero_speed(self):
        sv = site_state(ObserverSite(90.0, 45.0, 0.0), Epoch(1234.0))
        assert np.linalg.norm(sv.velocity) == pytest.approx(0.0, abs=1e-12)

    def test_radius_constant_and_speed_matches_spin(self):
        site = ObserverSite(34.0584, -106.8914, 0.0)
        for t in [0.0, 3600.0, 86400.0]:
            sv = site_state(site, Epoch(t))
            assert np.linalg.norm(sv.position) == pytest.approx(R_EARTH, rel=1e-12)
            axis_dist = math.hypot(sv.position[0], sv.position[1])
            assert np.linalg.norm(sv.velocity) == pytest.approx(
                OMEGA_EARTH * axis_dist, rel=1e-9
            )

    def test_rotation_between_epochs(self):
        site = ObserverSite(-7.3195, 72.4229, 0.0)
        dt = 5431.0
        p0 = site_state(site, Epoch(0.0)).position
        p1 = site_state(site, Epoch(dt)).position
        ang0 = math.atan2(p0[1], p0[0])
        ang1 = math.atan2(p1[1], p1[0])
        assert abs(wrap_angle_diff(ang1 - ang0 - OMEGA_EARTH * dt)) < 1e-10
        assert p0[2] == pytest.approx(p1[2], abs=1e-12)


class TestMeasureRadec:
    def test_line_of_sight_along_x(self):
        obs = StateVector([7000, 0, 0], [0, 0, 0])
        tgt = StateVector([8000, 0, 0], [0, 0, 0])
        z = measure_radec(tgt, obs)
        assert z.ra == 0.0
        assert z.dec == 0.0

    def test_pole_convention(self):
        obs = StateVector([7000, 0, 0], [0, 0, 0])
        tgt = StateVector([7000, 0, 5000], [0, 0, 0])
        z = measure_radec(tgt, obs)
        assert z.dec == pytest.approx(math.pi / 2)
        assert z.ra == 0.0

    def test_velocity_columns_zero(self):
        obs = StateVector([7000, 0, 0], [0, 1, 0])
        tgt = StateVector([9000, 2000, 1500], [1, 2, 3])
        H = measurement_jacobian(tgt, obs)
        np.testing.assert_array_equal(H[:, 3:], np.zeros((2, 3)))

    def test_rejects_zero_range(self):
        obs = StateVector([7000, 0, 0], [0, 0, 0])
        with pytest.raises(DegenerateGeometry):
            measure_radec(obs, obs)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        checked = 0
        for _ in range(100):
            r = rng.uniform(7000, 45000)
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            tgt = StateVector(r * u, rng.normal(scale=3.0, size=3))
            obs = site_state(
                ObserverSite(rng.uniform(-60, 60), rng.uniform(-180, 180), 0.0),
                Epoch(float(rng.uniform(0, 86400))),
            )
            delta = tgt.position - obs.position
            if np.hypot(delta[0], delta[1]) < 100.0:
                continue  # skip near-pole geometry where ra is ill-conditioned
            H = measurement_jacobian(tgt, obs)
            step = 1e-4 * max(1.0, np.linalg.norm(delta))
            fd = np.zeros((2, 6))
            for j in range(3):
                dv = np.zeros(3)
                dv[j] = step
                zp = measure_radec(StateVector(tgt.position + dv, tgt.velocity), obs)
                zm = measure_radec(StateVector(tgt.position - dv, tgt.velocity), obs)
                fd[0, j] = wrap_angle_diff(zp.ra - zm.ra) / (2 * step)
                fd[1, j] = (zp.dec - zm.dec) / (2 * step)
            scale = max(np.abs(fd).max(), 1e-12)
            np.testing.assert_allclose(H, fd, atol=1e-6 * scale)
            checked += 1
        assert checked >= 80


def test_wrap_functions():
    assert wrap_angle(2 * math.pi) == 0.0
    assert wrap_angle(-0.1) == pytest.approx(2 * math.pi - 0.1)
    assert wrap_angle_diff(math.pi + 0.1) == pytest.approx(-math.pi + 0.1)
    assert wrap_angle_diff(-math.pi) == -math.pi
