import math

import numpy as np
import pytest

from skysweep.astro import Epoch, ObserverSite, StateVector, measure_radec, site_state
from skysweep.cphd import (
    CardinalityPmf,
    ClutterModel,
    CphdState,
    DetectionModel,
    MeasurementSet,
    update,
)
from skysweep.gmm import FovRect, GaussianMixture
from skysweep.reward import (
    Action,
    KnnIndex,
    ParticleCloud,
    RewardConfig,
    build_knn,
    expected_reward,
    particle_update_weights,
    prepare_reward_context,
    renyi_reward,
    rng_stream,
    sample_measurement_set,
    sample_particles,
    sample_target_count,
    select_action,
    target_count_pmf,
)

OBSERVER = site_state(ObserverSite(20.7, -156.3), Epoch(0.0))
R_NOISE = np.diag([math.radians(3.0 / 3600) ** 2] * 2)


def geo_state(angle=0.35, radius=42164.0):
    v = math.sqrt(398600.4418 / radius)
    return np.array(
        [radius * math.cos(angle), radius * math.sin(angle), 0.0,
         -v * math.sin(angle), v * math.cos(angle), 0.0]
    )


def geo_cov(pos_sigma=100.0, vel_sigma=0.02):
    return np.diag([pos_sigma**2] * 3 + [vel_sigma**2] * 3)


def single_gaussian_state(nhat=1.0, angle=0.35, pos_sigma=150.0):
    mix = GaussianMixture(
        np.array([nhat]), geo_state(angle)[None, :], geo_cov(pos_sigma)[None]
    )
    return CphdState(mix, CardinalityPmf.point_mass(int(round(nhat)), 12))


def fov_at(angle, half_deg=3.0):
    z = measure_radec(StateVector(*np.split(geo_state(angle), 2)), OBSERVER)
    return FovRect(z.ra, z.dec, math.radians(half_deg), math.radians(half_deg))


def empty_clutter(p_d=0.75):
    return ClutterModel(Epoch(0.0), np.zeros((0, 6)), np.zeros((0, 6, 6)), p_d)


def synthetic_cloud_1d(samples: np.ndarray) -> ParticleCloud:
    """Embed 1D samples in the 6D state space with inert projections."""
    n = samples.size
    states = np.zeros((n, 6))
    states[:, 0] = samples
    return ParticleCloud(states=states, projected=np.zeros((n, 2)))


class TestSampleParticles:
    def test_mean_clt_bound(self):
        state = single_gaussian_state()
        rng = np.random.default_rng(0)
        cloud = sample_particles(state.intensity, 10_000, rng, OBSERVER)
        mu = state.intensity.means[0]
        sig = np.sqrt(np.diag(state.intensity.covs[0]))
        assert np.all(np.abs(cloud.states.mean(axis=0) - mu) < 4 * sig / 100)

    def test_zero_weight_component_never_sampled(self):
        mix = GaussianMixture(
            np.array([1.0, 0.0]),
            np.stack([geo_state(0.3), geo_state(1.5)]),
            np.broadcast_to(geo_cov(10.0), (2, 6, 6)).copy(),
        )
        cloud = sample_particles(mix, 500, np.random.default_rng(1), OBSERVER)
        ref = geo_state(0.3)
        assert np.all(np.linalg.norm(cloud.states[:, :3] - ref[:3], axis=1) < 1000.0)

    def test_seed_determinism(self):
        state = single_gaussian_state()
        a = sample_particles(state.intensity, 300, rng_stream(7, 1), OBSERVER)
        b = sample_particles(state.intensity, 300, rng_stream(7, 1), OBSERVER)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.projected, b.projected)


class TestBuildKnn:
    def test_collinear_hand_geometry(self):
        cloud = synthetic_cloud_1d(np.array([0.0, 1.0, 3.0]))
        knn = build_knn(cloud, ell=2)
        # neighbors of the middle point: itself then x=0
        assert set(knn.indices[1]) == {1, 0}
        # radius: distance to the 2nd non-self neighbor, standardized metric
        sd = cloud.states[:, 0].std()
        assert knn.radii[1] == pytest.approx(2.0 / sd)

    def test_self_inclusion(self):
        rng = np.random.default_rng(2)
        cloud = synthetic_cloud_1d(rng.normal(size=50))
        knn = build_knn(cloud, ell=5)
        assert np.all(knn.indices[:, 0] == np.arange(50))

    def test_matches_bruteforce_all_pairs(self):
        rng = np.random.default_rng(3)
        states = rng.normal(size=(100, 6)) * np.array([1e4, 1e4, 1e4, 1.0, 1.0, 1.0])
        cloud = ParticleCloud(states=states, projected=np.zeros((100, 2)))
        ell = 10
        knn = build_knn(cloud, ell)
        sd = states.std(axis=0)
        scaled = states / sd
        d2 = ((scaled[:, None, :] - scaled[None, :, :]) ** 2).sum(axis=2)
        for i in range(100):
            order = np.argsort(d2[i], kind="stable")
            assert set(knn.indices[i]) == set(order[:ell])
            assert knn.radii[i] == pytest.approx(math.sqrt(d2[i, order[ell]]))

    def test_duplicate_points_flagged(self):
        samples = np.array([0.0, 0.0, 0.0, 1.0, 2.0, 3.0])
        cloud = synthetic_cloud_1d(samples)
        with pytest.warns(UserWarning, match="duplicate"):
            knn = build_knn(cloud, ell=2)
        assert np.all(knn.radii > 0)


class TestTargetCountSampling:
    def test_two_bernoullis_enumerated(self):
        pmf = target_count_pmf(np.array([0.75, 0.75]))
        np.testing.assert_allclose(pmf, [0.0625, 0.375, 0.5625], atol=1e-14)

    def test_empty(self):
        np.testing.assert_array_equal(target_count_pmf(np.zeros(0)), [1.0])
        assert sample_target_count(np.zeros(0), np.random.default_rng(0)) == 0

    def test_sampler_tracks_pmf(self):
        q = np.array([0.75, 0.75])
        pmf = target_count_pmf(q)
        rng = np.random.default_rng(5)
        draws = np.array([sample_target_count(q, rng) for _ in range(20_000)])
        freq = np.bincount(draws, minlength=3) / draws.size
        np.testing.assert_allclose(freq, pmf, atol=0.02)


class TestParticleUpdate:
    def test_empty_scan_no_overlap_is_identity(self):
        state = single_gaussian_state()
        cloud = sample_particles(state.intensity, 2000, rng_stream(1), OBSERVER)
        det = DetectionModel(0.75, fov_at(1.2), OBSERVER)
        Z = MeasurementSet(np.zeros((0, 2)), Epoch(0.0), R_NOISE)
        w, card = particle_update_weights(cloud, Z, det, empty_clutter(), state.cardinality)
        np.testing.assert_allclose(w, np.full(2000, 1 / 2000), atol=1e-15)
        np.testing.assert_allclose(card.probs, state.cardinality.probs, atol=1e-12)

    def test_empty_scan_all_inside_scalar_model(self):
        prior = CardinalityPmf.poisson(3.0, 40)
        mix = GaussianMixture(
            np.array([prior.mean()]), geo_state()[None, :], geo_cov(20.0, 0.005)[None]
        )
        state = CphdState(mix, prior)
        cloud = sample_particles(state.intensity, 3000, rng_stream(2), OBSERVER)
        p_d = 0.75
        det = DetectionModel(p_d, fov_at(0.35, half_deg=3.0), OBSERVER)
        assert np.all(det.fov.contains(cloud.projected[:, 0], cloud.projected[:, 1]))
        Z = MeasurementSet(np.zeros((0, 2)), Epoch(0.0), R_NOISE)
        w, card = particle_update_weights(cloud, Z, det, empty_clutter(), prior)
        np.testing.assert_allclose(w, np.full(3000, 1 / 3000), atol=1e-15)
        ns = np.arange(41)
        rho_oracle = prior.probs * (1 - p_d) ** ns
        rho_oracle /= rho_oracle.sum()
        np.testing.assert_allclose(card.probs, rho_oracle, atol=1e-12)
        assert card.mean() < prior.mean()

    def test_matches_gm_update_expected_cardinality(self):
        # Gaussian wholly inside the FOV plus one measurement: the mixture
        # update is exact, the particle update carries Monte-Carlo error from
        # the likelihood inner products; expected cardinalities must agree
        # within that error.
        prior = CardinalityPmf.poisson(3.0, 40)
        mix = GaussianMixture(
            np.array([prior.mean()]), geo_state()[None, :], geo_cov(150.0, 0.02)[None]
        )
        state = CphdState(mix, prior)
        det = DetectionModel(0.75, fov_at(0.35, half_deg=3.0), OBSERVER)
        z0 = measure_radec(StateVector(*np.split(geo_state(0.35), 2)), OBSERVER)
        z = np.array([[z0.ra + 3e-6, z0.dec - 2e-6]])
        Z = MeasurementSet(z, Epoch(0.0), R_NOISE)

        gm_post = update(state, Z, det, empty_clutter())
        n = 10_000
        estimates = []
        for seed in range(10):
            cloud = sample_particles(state.intensity, n, rng_stream(30 + seed), OBSERVER)
            _, card = particle_update_weights(cloud, Z, det, empty_clutter(), prior)
            estimates.append(card.mean())
        spread = float(np.std(estimates))
        assert abs(estimates[0] - gm_post.cardinality.mean()) < 3 * max(spread, 1e-6)


class TestRenyiReward:
    def test_prior_equals_posterior_is_exactly_zero(self):
        rng = np.random.default_rng(4)
        cloud = synthetic_cloud_1d(rng.normal(size=500))
        knn = build_knn(cloud, 10)
        prior = CardinalityPmf.poisson(3.0, 30)
        w = np.full(500, 1 / 500)
        assert renyi_reward(cloud, w, prior, prior, knn, 0.5) == 0.0

    def test_gaussian_pair_matches_closed_form(self):
        # shifted-mean importance weights: the estimator approximates the
        # analytic Renyi divergence alpha*dmu^2/(2*sigma^2) = 0.25
        rng = np.random.default_rng(6)
        for n, tol in [(1000, 0.45), (10_000, 0.15)]:
            x = rng.normal(size=n)
            cloud = synthetic_cloud_1d(x)
            knn = build_knn(cloud, 10)
            logw = -0.5 * ((x - 1.0) ** 2 - x**2)
            w = np.exp(logw)
            w /= w.sum()
            card = CardinalityPmf.point_mass(1, 5)
            est = renyi_reward(cloud, w, card, card, knn, 0.5)
            if n == 10_000:
                assert abs(est - 0.25) <= 0.15 * 0.25
                assert abs(est - 0.25) < last_err  # error shrinks with n
            last_err = abs(est - 0.25)

    def test_cardinality_only_change(self):
        rng = np.random.default_rng(7)
        cloud = synthetic_cloud_1d(rng.normal(size=400))
        knn = build_knn(cloud, 10)
        w = np.full(400, 1 / 400)
        prior = CardinalityPmf.poisson(3.0, 30)
        post = CardinalityPmf.poisson(2.0, 30)
        alpha = 0.5
        got = renyi_reward(cloud, w, prior, post, knn, alpha)
        want = float(
            np.log((post.probs**alpha * prior.probs ** (1 - alpha)).sum()) / (alpha - 1)
        )
        assert got == pytest.approx(want, rel=1e-9)


class TestMeasurementSetSampling:
    def make_ctx(self, state, clut, seed=9):
        cfg = RewardConfig(n_samp=2000, seed=seed)
        return prepare_reward_context(
            state, clut, OBSERVER, 0.75, R_NOISE, Epoch(0.0), cfg, rng_stream(seed)
        ), cfg

    def test_empty_fov_always_empty(self):
        ctx, _ = self.make_ctx(single_gaussian_state(), empty_clutter())
        action = Action.at(2.0, 0.8, math.radians(3), math.radians(3))
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert len(sample_measurement_set(action, ctx, rng)) == 0

    def test_certain_detection_single_catalog_object(self):
        clut = ClutterModel(
            Epoch(0.0), geo_state(0.35)[None, :], geo_cov(5.0, 0.001)[None], 1.0
        )
        state = single_gaussian_state(angle=1.2)  # target mass far away
        cfg = RewardConfig(n_samp=1000, seed=1)
        ctx = prepare_reward_context(
            state, clut, OBSERVER, 1.0, R_NOISE, Epoch(0.0), cfg, rng_stream(1)
        )
        fov = fov_at(0.35)
        action = Action(fov.center_ra, fov.center_dec, fov)
        rng = np.random.default_rng(2)
        for _ in range(50):
            Z = sample_measurement_set(action, ctx, rng)
            assert len(Z) == 1

    def test_counts_never_exceed_support(self):
        state = single_gaussian_state(nhat=2.0)
        clut = ClutterModel(
            Epoch(0.0), geo_state(0.352)[None, :], geo_cov(5.0, 0.001)[None], 0.75
        )
        ctx, _ = self.make_ctx(state, clut)
        fov = fov_at(0.35, half_deg=3.0)
        action = Action(fov.center_ra, fov.center_dec, fov)
        n_in = int(fov.contains(ctx.cloud.projected[:, 0], ctx.cloud.projected[:, 1]).sum())
        rng = np.random.default_rng(3)
        for _ in range(100):
            Z = sample_measurement_set(action, ctx, rng)
            assert len(Z) <= 1 + n_in


class TestExpectedRewardAndSelect:
    def test_empty_fov_reward_exactly_zero(self):
        state = single_gaussian_state()
        cfg = RewardConfig(n_samp=1500, n_trials=4, seed=3)
        ctx = prepare_reward_context(
            state, empty_clutter(), OBSERVER, 0.75, R_NOISE, Epoch(0.0), cfg, rng_stream(3)
        )
        action = Action.at(2.0, 0.8, math.radians(3), math.radians(3))
        assert expected_reward(action, ctx, cfg, np.random.default_rng(0)) == 0.0

    def test_covering_action_wins(self):
        state = single_gaussian_state()
        cfg = RewardConfig(n_samp=1500, n_trials=4, seed=4)
        det = DetectionModel(1.0, fov_at(0.35), OBSERVER)
        covering = fov_at(0.35)
        actions = [
            Action.at(2.0, 0.8, covering.half_width, covering.half_height),
            Action(covering.center_ra, covering.center_dec, covering),
        ]
        idx, best, rewards = select_action(
            actions, state, empty_clutter(), det, cfg, Epoch(0.0), R_NOISE, scan_index=0
        )
        assert idx == 1
        assert rewards[0] == 0.0
        assert rewards[1] > 0.0

    def test_single_action_selected(self):
        state = single_gaussian_state()
        cfg = RewardConfig(n_samp=1200, n_trials=2, seed=5)
        det = DetectionModel(0.75, fov_at(0.35), OBSERVER)
        fov = fov_at(0.35)
        actions = [Action(fov.center_ra, fov.center_dec, fov)]
        idx, best, rewards = select_action(
            actions, state, empty_clutter(), det, cfg, Epoch(0.0), R_NOISE
        )
        assert idx == 0 and rewards.shape == (1,)

    def test_bit_identical_reward_maps(self):
        state = single_gaussian_state()
        cfg = RewardConfig(n_samp=800, n_trials=3, seed=6)
        det = DetectionModel(0.75, fov_at(0.35), OBSERVER)
        fov = fov_at(0.35)
        actions = [
            Action(fov.center_ra, fov.center_dec, fov),
            Action.at(fov.center_ra + fov.half_width, fov.center_dec, fov.half_width, fov.half_height),
        ]
        out1 = select_action(actions, state, empty_clutter(), det, cfg, Epoch(0.0), R_NOISE, 3)
        out2 = select_action(actions, state, empty_clutter(), det, cfg, Epoch(0.0), R_NOISE, 3)
        assert out1[0] == out2[0]
        np.testing.assert_array_equal(out1[2], out2[2])

    def test_existence_clamp_warns(self):
        # expected count far above the particle count forces q >= 1
        mix = GaussianMixture(
            np.array([30.0]), geo_state()[None, :], geo_cov(30.0, 0.005)[None]
        )
        state = CphdState(mix, CardinalityPmf.point_mass(30, 35))
        cfg = RewardConfig(n_samp=20, ell=3, n_trials=1, seed=8)
        ctx = prepare_reward_context(
            state, empty_clutter(), OBSERVER, 1.0, R_NOISE, Epoch(0.0), cfg, rng_stream(8)
        )
        fov = fov_at(0.35)
        action = Action(fov.center_ra, fov.center_dec, fov)
        with pytest.warns(UserWarning, match="clamped"):
            expected_reward(action, ctx, cfg, np.random.default_rng(1))
