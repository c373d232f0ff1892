import numpy as np
import pytest
from scipy import stats

from latentsna import sampler as smp
from latentsna.model import ConnectomeDataset, NotPositiveDefiniteError, precision_from_cov
from latentsna.detect import covariance_intervals
from latentsna.sampler import SamplerConfig, SamplerError, run_chain
from latentsna.simulate import SimulationConfig, generate_cohort

from conftest import random_instance, random_spd
from oracles import step_log_ratio_errors


class TestConfig:
    def test_retained_length(self):
        assert SamplerConfig(n_iterations=2000, burn_in=1000, thin=5).n_retained == 200

    @pytest.mark.parametrize("kw", [
        {"n_iterations": 0}, {"burn_in": 10, "n_iterations": 10}, {"burn_in": -1},
        {"thin": 0}, {"init_scale": 0.0}, {"sign_handling": "entrywise"},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


class TestConditionals:
    def test_conditional_vs_joint(self, rng):
        errs = step_log_ratio_errors(rng, n_pairs=20)
        assert set(errs) >= {"beta", "a", "sigma2", "gamma", "b", "tau2", "z", "theta", "Sigma"}
        assert max(errs.values()) < 1e-8, errs

    def test_sigma_posterior_degrees_of_freedom(self, rng):
        _, s = random_instance(rng, N=4, V=3)
        df, scale = smp.sigma_conditional(s)
        assert df == 4 + 3 + 1 + 2
        F = np.column_stack([s.Z, s.theta])
        np.testing.assert_allclose(scale, np.eye(4) + F.T @ F)

    def test_z_variance_when_other_latents_are_zero(self, rng):
        data, s = random_instance(rng, N=3, V=3)
        Z = np.zeros((3, 3))
        Z[:, 1] = rng.normal(size=3)
        s = s.replace(Z=Z)
        _, var = smp.z_conditional(s, data, 1)
        Q = precision_from_cov(s.Sigma)
        np.testing.assert_allclose(var, 1.0 / Q[1, 1], rtol=1e-14)

    def test_theta_decouples_under_identity_sigma(self, rng):
        data, s = random_instance(rng, N=4, V=3, P=2)
        s = s.replace(Sigma=np.eye(4))
        m1, v1 = smp.theta_conditional(s, data)
        m2, _ = smp.theta_conditional(s.replace(Z=rng.normal(size=s.Z.shape)), data)
        np.testing.assert_allclose(m1, m2, atol=1e-14)
        t = (data.attributes - s.b - (data.attr_covariates @ s.gamma)[:, None]).sum(axis=1)
        np.testing.assert_allclose(m1, (t / s.tau2) / (2 / s.tau2 + 1), rtol=1e-12)
        np.testing.assert_allclose(v1, 1 / (2 / s.tau2 + 1), rtol=1e-12)

    def test_compiled_sweep_matches_reference(self, rng):
        data, s = random_instance(rng, N=6, V=5, P=2)
        Q = precision_from_cov(s.Sigma)
        offset = data.conn_covariates @ s.beta + s.a
        noise = rng.normal(size=(6, 5))
        Z = s.Z.copy()
        smp._sweep_regions(data.connectivity, data.conn_observed.astype(float), Z, s.theta,
                           Q, offset, 1 / s.sigma2, noise)
        ref = s.Z.copy()
        kern = smp._LatentKernel(data)
        for u in range(5):
            m, v = kern.region_moments(u, ref, s.theta, Q, offset, 1 / s.sigma2)
            ref[:, u] = m + np.sqrt(v) * noise[:, u]
        np.testing.assert_allclose(Z, ref, rtol=1e-12, atol=1e-12)

    def test_ssr_kernel_matches_direct(self, rng):
        data, s = random_instance(rng, N=5, V=4)
        ssr, m = smp.connectivity_ssr(s, data)
        iu, iv = np.triu_indices(4, 1)
        off = data.conn_covariates @ s.beta + s.a
        r = data.connectivity[:, iu, iv] - off[:, None] - s.Z[:, iu] * s.Z[:, iv]
        assert ssr == pytest.approx(np.sum(r ** 2), rel=1e-13) and m == 30


class TestSigmaUpdate:
    def test_analytic_inverse_wishart_mean(self, rng):
        data, s = random_instance(rng, N=5, V=2)
        df, scale = smp.sigma_conditional(s)
        draws = np.array([smp.update_Sigma(s, rng) for _ in range(100_000)])
        expected = scale / (df - 3 - 1)
        np.testing.assert_allclose(draws.mean(axis=0), expected,
                                   atol=0.02 * np.abs(expected).max())

    def test_draws_symmetric_pd(self, rng):
        _, s = random_instance(rng, N=4, V=3)
        for _ in range(50):
            S = smp.update_Sigma(s, rng)
            np.testing.assert_array_equal(S, S.T)
            assert np.linalg.eigvalsh(S)[0] > 0

    def test_jitter_retry_then_error(self, rng, monkeypatch):
        _, s = random_instance(rng, N=4, V=1)
        monkeypatch.setattr(smp.stats.invwishart, "rvs",
                            lambda **kw: np.array([[1.0, 1.0], [1.0, 1.0]]))
        S = smp.update_Sigma(s, rng)
        assert np.linalg.eigvalsh(S)[0] > 0
        monkeypatch.setattr(smp.stats.invwishart, "rvs",
                            lambda **kw: np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(NotPositiveDefiniteError):
            smp.update_Sigma(s, rng)


class TestAlignment:
    def test_fixed_point(self, rng):
        _, s = random_instance(rng, N=5, V=4)
        ref = smp.reference_signs_of(s.Z)
        assert smp.align_signs(s, ref) is s

    def test_flipped_row_restored(self, rng):
        _, s = random_instance(rng, N=5, V=4)
        ref = smp.reference_signs_of(s.Z)
        Z = s.Z.copy()
        Z[2] *= -1
        out = smp.align_signs(s.replace(Z=Z), ref)
        np.testing.assert_array_equal(out.Z, s.Z)

    def test_row_subset(self, rng):
        _, s = random_instance(rng, N=3, V=2)
        ref = smp.reference_signs_of(s.Z)
        out = smp.align_signs(s.replace(Z=-s.Z), ref, rows=[True, False, True])
        np.testing.assert_array_equal(out.Z[[0, 2]], s.Z[[0, 2]])
        np.testing.assert_array_equal(out.Z[1], -s.Z[1])

    def test_rows_without_connectivity_not_aligned(self):
        c = generate_cohort(SimulationConfig(N=30, V=4, signal_proportion=0.5, seed=2))
        d = c.dataset
        obs = np.arange(30) < 25
        d = ConnectomeDataset(d.connectivity, d.attributes, conn_observed=obs)
        seen = []
        ch = run_chain(d, SamplerConfig(n_iterations=200, burn_in=50, seed=3),
                       callback=lambda it, s: seen.append(s.Z.copy()))
        ip = np.array([np.einsum("ij,ij->i", Z, ch.reference_signs) for Z in seen])
        assert np.all(ip[:, obs] >= 0)
        assert np.any(ip[:, ~obs] < 0)

    def test_reflection_log_odds_zero_when_uncoupled(self, rng):
        _, s = random_instance(rng, N=5, V=3)
        assert np.all(smp.reflection_log_odds(s.replace(Sigma=np.eye(4)), np.eye(4)) == 0)

    def test_single_sign_regime_after_burn_in(self):
        c = generate_cohort(SimulationConfig(N=50, V=10, signal_proportion=0.3, seed=4))
        ref_checks = []

        def check(_, state):
            ref_checks.append(state.Z.copy())
        ch = run_chain(c.dataset, SamplerConfig(n_iterations=1500, burn_in=750, seed=1),
                       callback=check)
        ip = np.array([np.einsum("ij,ij->i", Z, ch.reference_signs) for Z in ref_checks])
        assert np.all(ip >= 0)
        for u in sorted(c.signal_regions):
            tr = ch.lambda_ztheta[:, u]
            assert np.count_nonzero(np.diff(np.sign(tr))) == 0


class TestRunChain:
    def test_deterministic(self, rng):
        c = generate_cohort(SimulationConfig(N=40, V=5, seed=2))
        cfg = SamplerConfig(n_iterations=60, burn_in=20, seed=9, keep_latents=True)
        a, b = run_chain(c.dataset, cfg), run_chain(c.dataset, cfg)
        for name in ("lambda_ztheta", "sigma2", "tau2", "beta", "Z", "theta", "Z_mean", "zz_mean"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        assert a.counters == b.counters

    def test_bookkeeping(self):
        c = generate_cohort(SimulationConfig(N=10, V=4, seed=2))
        ch = run_chain(c.dataset, SamplerConfig(n_iterations=50, burn_in=20, thin=4))
        assert len(ch) == 7 and ch.counters["iterations"] == 50
        assert ch.reference_signs.shape == (10, 4)

    def test_retained_sigma_pd(self):
        c = generate_cohort(SimulationConfig(N=30, V=4, seed=5))
        mins = []
        run_chain(c.dataset, SamplerConfig(n_iterations=80, burn_in=20),
                  callback=lambda it, s: mins.append(np.linalg.eigvalsh(s.Sigma)[0]))
        assert len(mins) == 60 and min(mins) > 0

    def test_step_failure_carries_iteration(self, monkeypatch):
        c = generate_cohort(SimulationConfig(N=10, V=3, seed=1))
        calls = {"n": 0}
        orig = smp.update_Sigma

        def flaky(state, rng):
            calls["n"] += 1
            if calls["n"] == 3:
                raise NotPositiveDefiniteError("boom")
            return orig(state, rng)
        monkeypatch.setattr(smp, "update_Sigma", flaky)
        with pytest.raises(SamplerError) as ei:
            run_chain(c.dataset, SamplerConfig(n_iterations=10, burn_in=5))
        assert ei.value.iteration == 3 and ei.value.step == "Sigma"

    def test_reflected_chain(self):
        c = generate_cohort(SimulationConfig(N=20, V=3, seed=1))
        ch = run_chain(c.dataset, SamplerConfig(n_iterations=30, burn_in=10))
        r = ch.reflected()
        np.testing.assert_array_equal(r.lambda_ztheta, -ch.lambda_ztheta)
        np.testing.assert_array_equal(r.zz_mean, ch.zz_mean)

    @pytest.mark.slow
    def test_recovers_coupling_on_synthetic_data(self):
        c = generate_cohort(SimulationConfig(N=500, V=10, signal_proportion=0.3, seed=11))
        ch = run_chain(c.dataset, SamplerConfig(n_iterations=3000, burn_in=1500, seed=3))
        rep = covariance_intervals(ch)
        r = np.corrcoef(rep.mean, c.truth.Lambda_ztheta)[0, 1]
        assert r >= 0.9
