import math

import numpy as np
import pytest

from latentsna import simulate as sim
from latentsna.model import edge_indices
from latentsna.sampler import SamplerConfig
from latentsna.simulate import (
    ComparisonTable, SimulationConfig, build_sigma, compare_multivariate_vs_sum,
    draw_latents, generate_cohort, run_comparison, score_method, split_indices,
)

TINY = SamplerConfig(n_iterations=20, burn_in=10)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"N": 0}, {"signal_proportion": 1.5}, {"snr": 0},
                                    {"attr_noise_vars": (1.0,)}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SimulationConfig(**kw)

    def test_dict_round_trip(self):
        c = SimulationConfig(P=2, attr_noise_vars=[0.2, 1.0])
        assert SimulationConfig.from_dict(c.to_dict()) == c


class TestSigma:
    def test_null_is_identity(self):
        c = generate_cohort(SimulationConfig(N=20, V=6, signal_proportion=0.0))
        np.testing.assert_array_equal(c.truth.Sigma, np.eye(7))
        assert not c.signal_regions and not c.truth.Lambda_ztheta.any()

    def test_signal_count(self):
        c = generate_cohort(SimulationConfig(N=10, V=20, signal_proportion=0.1))
        assert len(c.signal_regions) == 2
        lam = c.truth.Lambda_ztheta
        np.testing.assert_array_equal(np.flatnonzero(lam), sorted(c.signal_regions))
        assert np.all(lam[sorted(c.signal_regions)] == 0.9)

    @pytest.mark.parametrize("k", [1, 2, 6, 20])
    def test_always_pd_unit_variance(self, k):
        S = build_sigma(20, range(k), 0.9)
        assert np.linalg.eigvalsh(S)[0] > 0
        assert S[20, 20] == 1.0

    def test_ridge_repair(self):
        # six regions coupled at magnitude 1 are singular, so the ridge applies
        S = build_sigma(6, range(6), 1.0)
        assert np.linalg.eigvalsh(S)[0] > 0 and S[0, 0] > 1.0

    def test_repair_failure(self):
        with pytest.raises(sim.CohortGenerationError, match="V=4"):
            build_sigma(4, range(4), 50.0)


class TestDrawLatents:
    def test_large_sample_moments(self):
        S = build_sigma(5, [1, 3], 0.9)
        Z, th = draw_latents(S, 100_000, np.random.default_rng(0))
        emp = np.cov(np.column_stack([Z, th]).T)
        assert np.abs(emp - S).max() < 0.01


class TestCohort:
    def test_round_trip_without_noise(self):
        c = generate_cohort(SimulationConfig(N=15, V=5, snr=math.inf, seed=3), standardize=False)
        iu, iv = edge_indices(5)
        Z = c.truth.Z
        np.testing.assert_array_equal(c.dataset.connectivity[:, iu, iv], Z[:, iu] * Z[:, iv])

    def test_snr_sets_noise_variance(self):
        c = generate_cohort(SimulationConfig(N=3000, V=8, snr=0.5, seed=1), standardize=False)
        iu, iv = edge_indices(8)
        Z = c.truth.Z
        bil = Z[:, iu] * Z[:, iv]
        resid = c.dataset.connectivity[:, iu, iv] - bil
        assert c.noise_var == pytest.approx(bil.var() / 0.5)
        assert resid.var() == pytest.approx(c.noise_var, rel=0.03)

    def test_attribute_noise(self):
        c = generate_cohort(SimulationConfig(N=20000, V=3, P=2, attr_noise_vars=(0.1, 2.0), seed=2))
        r = c.dataset.attributes - c.truth.theta[:, None]
        np.testing.assert_allclose(r.var(axis=0), [0.1, 2.0], rtol=0.05)

    def test_standardized_and_deterministic(self):
        cfg = SimulationConfig(N=50, V=6, seed=7)
        a, b = generate_cohort(cfg), generate_cohort(cfg)
        np.testing.assert_array_equal(a.dataset.connectivity, b.dataset.connectivity)
        e = a.dataset.edge_matrix
        np.testing.assert_allclose(e.mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(e.std(0, ddof=1), 1, atol=1e-12)


def cohort_with(V, signal):
    c = generate_cohort(SimulationConfig(N=4, V=V, signal_proportion=0.0))
    return sim.SyntheticCohort(c.dataset, c.truth, frozenset(signal), c.config)


class TestScore:
    def test_perfect_and_all_flagged(self):
        c = cohort_with(5, {1, 3})
        flags = np.isin(np.arange(5), [1, 3])
        assert score_method(c, flags) == {"power": 1.0, "specificity": 1.0}
        assert score_method(c, np.ones(5, bool)) == {"power": 1.0, "specificity": 0.0}

    def test_partial(self):
        c = cohort_with(5, {1, 3})
        r = score_method(c, [True, True, False, False, False], prediction_correlation=0.4)
        assert r == {"power": 0.5, "specificity": 2 / 3, "prediction_correlation": 0.4}

    def test_undefined_metrics(self):
        assert math.isnan(score_method(cohort_with(3, set()), [0, 0, 0])["power"])
        assert math.isnan(score_method(cohort_with(3, {0, 1, 2}), [0, 0, 0])["specificity"])

    def test_length(self):
        with pytest.raises(ValueError):
            score_method(cohort_with(3, {0}), [True])

    def test_relabeling_invariance(self, rng):
        c = cohort_with(8, {0, 5, 6})
        flags = rng.random(8) < 0.5
        perm = rng.permutation(8)
        inv = np.argsort(perm)
        c2 = cohort_with(8, {int(inv[s]) for s in c.signal_regions})
        assert score_method(c2, flags[perm]) == score_method(c, flags)


class TestSplit:
    def test_partition(self, rng):
        tr, te = split_indices(10, 0.2, rng)
        assert len(te) == 2 and sorted(np.concatenate([tr, te])) == list(range(10))

    def test_bounds(self, rng):
        assert len(split_indices(2, 0.01, rng)[1]) == 1
        with pytest.raises(ValueError):
            split_indices(10, 1.0, rng)


class TestComparison:
    def test_single_row(self):
        t = run_comparison([SimulationConfig(N=40, V=5)], methods=["CPM"], replicates=1)
        assert isinstance(t, ComparisonTable) and len(t) == 1
        row = t.lookup("CPM", 0)
        assert row["replicates"] == 1 and row["failed"] == 0
        assert set(ComparisonTable.COLUMNS) <= set(row)

    def test_deterministic_and_order_free(self):
        grid = [SimulationConfig(N=40, V=5), SimulationConfig(N=40, V=5, signal_proportion=0.4)]
        kw = dict(methods=["LatentSNA", "CPM", "Lasso", "CCA"], replicates=2,
                  master_seed=3, sampler_config=TINY)
        a, b = run_comparison(grid, **kw), run_comparison(grid, **kw)
        assert a.rows == b.rows
        # parallel execution reorders work but not results
        c = run_comparison(grid, n_jobs=2, **kw)
        assert c.rows == a.rows
        assert [r["flags"] for r in c.records] == [r["flags"] for r in a.records]

    def test_failures_recorded(self, monkeypatch):
        orig = sim._run_method

        def boom(method, *args):
            if method == "CPM":
                raise RuntimeError("no edges")
            return orig(method, *args)
        monkeypatch.setattr(sim, "_run_method", boom)
        t = run_comparison([SimulationConfig(N=40, V=5)], methods=["CPM", "CCA"], replicates=2)
        fails = t.failures()
        assert len(fails) == 2 and all("no edges" in f["error"] for f in fails)
        assert {(f["cell"], f["replicate"]) for f in fails} == {(0, 0), (0, 1)}
        assert t.lookup("CPM", 0)["failed"] == 2 and t.lookup("CCA", 0)["failed"] == 0

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown method"):
            run_comparison([SimulationConfig(N=20, V=4)], methods=["PCA"], replicates=1)

    def test_thread_cap(self, monkeypatch):
        monkeypatch.setenv("LATENTSNA_THREADS", "2")
        assert sim._n_jobs(8) == 2
        monkeypatch.setenv("LATENTSNA_THREADS", "x")
        with pytest.raises(ValueError):
            sim._n_jobs(2)


class TestMultivariateVsSum:
    def test_requires_two_attributes(self):
        c = generate_cohort(SimulationConfig(N=20, V=4, P=1))
        with pytest.raises(ValueError, match="requires P ≥ 2"):
            compare_multivariate_vs_sum(c, TINY)

    def test_paired_output(self):
        c = generate_cohort(SimulationConfig(N=40, V=4, P=3, seed=1))
        out = compare_multivariate_vs_sum(c, TINY, n_splits=2)
        assert out["multivariate"].shape == out["sum"].shape == (2,)
        assert out["sum_mean"] == pytest.approx(out["sum"].mean())
