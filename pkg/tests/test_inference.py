import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from stratpart.belief import fit_ols_belief
from stratpart.domain import CLUSTER_KEYS
from stratpart.inference import (
    BootstrapError,
    BootstrapSpec,
    TestResult,
    beta_mle,
    bootstrap,
    direction_indicator,
    exogeneity_test,
    kruskal_wallis,
    ks_test,
    late_validity_test,
    proportion_tests,
    resample_indices,
    wald_test,
)
from stratpart.numerics import RandomStream, two_sided_p
from stratpart.participation import fit_cf_joint_mle, fit_probit, joint_wald_coefficients


class TestWald:
    def test_estimate_equals_target(self):
        r = wald_test([0.3, -1.0], np.diag([0.1, 0.2]), np.eye(2), [0.3, -1.0])
        assert r.statistic == 0 and r.p_value == 1.0

    @given(st.floats(-50, 50), st.floats(0.01, 10))
    @settings(max_examples=50)
    def test_single_restriction_root_is_ratio(self, est, se):
        r = wald_test(est, se**2)
        assert r.extra["z"] == pytest.approx(est / se, rel=1e-12)
        assert r.p_value == pytest.approx(two_sided_p(est / se), abs=1e-12)
        assert r.statistic == pytest.approx((est / se) ** 2, rel=1e-10)

    def test_joint_restrictions_against_chi2_oracle(self, planted_ds):
        f = fit_probit(planted_ds)
        R, r = joint_wald_coefficients(f)
        # the 13 non-constant coefficients; test a 12-restriction subset
        R = R[1:]
        res = wald_test(f.params, f.covariance, R, np.zeros(R.shape[0]))
        assert res.df == 12
        oracle = float(mpmath.gammainc(6, res.statistic / 2, mpmath.inf, regularized=True))
        assert res.p_value == pytest.approx(oracle, abs=1e-8)

    def test_singular_restriction_covariance(self):
        with pytest.raises(Exception):
            wald_test([1.0, 2.0], np.zeros((2, 2)))

    def test_dependent_restrictions(self):
        with pytest.raises(ValueError):
            wald_test([1.0, 2.0], np.eye(2), np.array([[1.0, 0], [2.0, 0]]))


class TestExogeneity:
    def test_on_joint_fit(self, planted_ds):
        f = fit_cf_joint_mle(planted_ds)
        r = exogeneity_test(f)
        se = math.sqrt(f.covariance[-1, -1])
        assert r.statistic == pytest.approx((f.params[-1] / se) ** 2)
        assert r.df == 1

    def test_requires_joint_fit(self, planted_ds):
        with pytest.raises(ValueError):
            exogeneity_test(fit_probit(planted_ds))


class TestBootstrap:
    def test_identical_records_zero_se(self, planted_ds):
        ds = planted_ds.take(np.zeros(50, dtype=int))
        res = bootstrap(ds, lambda d: [d.delta_b.mean()], BootstrapSpec(20, seed=1))
        assert res.se[0] == 0.0

    def test_reproducible(self, planted_ds):
        fn = lambda d: [d.delta_b.mean(), d.a.mean()]
        a = bootstrap(planted_ds, fn, BootstrapSpec(30, CLUSTER_KEYS, seed=5))
        b = bootstrap(planted_ds, fn, BootstrapSpec(30, CLUSTER_KEYS, seed=5))
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_replication_independent_of_order(self, planted_ds):
        ids = planted_ds.cluster_ids(CLUSTER_KEYS)
        direct = resample_indices(ids, RandomStream(9, 17).generator())
        res = bootstrap(planted_ds, lambda d: [d.delta_b.sum()], BootstrapSpec(18, CLUSTER_KEYS, seed=9))
        assert res.draws[17, 0] == pytest.approx(planted_ds.delta_b[direct].sum())

    def test_ols_se_matches_classical(self, planted_ds):
        fit = fit_ols_belief(planted_ds)
        res = bootstrap(planted_ds, lambda d: fit_ols_belief(d).theta_hat, BootstrapSpec(1000, seed=3))
        classical = np.sqrt(np.diag(fit.covariance))
        np.testing.assert_allclose(res.se, classical, rtol=0.10)

    def test_singleton_clusters_match_plain(self, planted_ds):
        import dataclasses

        ds = dataclasses.replace(planted_ds, location=np.array([f"L{i}" for i in range(planted_ds.n)], dtype=object))
        fn = lambda d: [d.delta_b.mean()]
        a = bootstrap(ds, fn, BootstrapSpec(400, ("location",), seed=2)).se[0]
        b = bootstrap(ds, fn, BootstrapSpec(400, None, seed=3)).se[0]
        assert a == pytest.approx(b, rel=0.15)

    def test_cluster_count_is_populated_cells(self, planted_ds):
        res = bootstrap(planted_ds, lambda d: [d.a.mean()], BootstrapSpec(2, CLUSTER_KEYS))
        cells = set(zip(planted_ds.location, planted_ds.enroll_date, planted_ds.treat_date))
        assert res.n_clusters == len(cells) <= 120
        assert res.method == "cluster-bootstrap"

    def test_failures_counted_and_dropped(self, planted_ds):
        calls = {"n": 0}

        def flaky(d):
            calls["n"] += 1
            if calls["n"] % 3 == 0:
                raise RuntimeError("no convergence")
            return [d.a.mean()]

        res = bootstrap(planted_ds, flaky, BootstrapSpec(30, seed=1))
        assert res.failed == 10 and res.completed == 20

    def test_all_failed(self, planted_ds):
        def bad(d):
            if d is not planted_ds:
                raise RuntimeError("x")
            return [1.0]

        with pytest.raises(BootstrapError):
            bootstrap(planted_ds, bad, BootstrapSpec(5))

    def test_no_drop_reraises(self, planted_ds):
        def bad(d):
            if d is not planted_ds:
                raise RuntimeError("x")
            return [1.0]

        with pytest.raises(RuntimeError):
            bootstrap(planted_ds, bad, BootstrapSpec(5, drop_failed=False))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            BootstrapSpec(0)


def enumerate_ks_p(x, y):
    """P(D >= d_obs) by listing every assignment of pooled values to samples."""
    pooled = np.concatenate([x, y])
    n = len(x)
    d_obs = ks_test(x, y).statistic
    hits = total = 0
    for idx in itertools.combinations(range(pooled.size), n):
        mask = np.zeros(pooled.size, bool)
        mask[list(idx)] = True
        a, b = pooled[mask], pooled[~mask]
        grid = np.union1d(a, b)
        d = np.max(np.abs(np.searchsorted(np.sort(a), grid, "right") / a.size
                          - np.searchsorted(np.sort(b), grid, "right") / b.size))
        hits += d >= d_obs - 1e-12
        total += 1
    return hits / total


class TestKs:
    def test_identical(self):
        r = ks_test([1, 2, 3], [1, 2, 3])
        assert r.statistic == 0 and r.p_value == 1

    def test_disjoint(self):
        assert ks_test([1, 2, 3], [4, 5, 6, 7]).statistic == 1

    @pytest.mark.parametrize("seed", range(4))
    def test_exact_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=5), rng.normal(0.8, size=5)
        assert ks_test(x, y).p_value == pytest.approx(enumerate_ks_p(x, y), abs=1e-12)

    def test_exact_with_ties_matches_enumeration(self):
        x = np.array([1, 1, 2, 3, 3.0])
        y = np.array([2, 3, 3, 4, 4, 5.0])
        assert ks_test(x, y).p_value == pytest.approx(enumerate_ks_p(x, y), abs=1e-12)

    def test_exact_agrees_with_scipy_without_ties(self):
        rng = np.random.default_rng(11)
        x, y = rng.normal(size=8), rng.normal(0.5, size=9)
        ref = stats.ks_2samp(x, y, method="exact").pvalue
        assert ks_test(x, y).p_value == pytest.approx(ref, rel=1e-8)

    def test_asymptotic_large(self):
        rng = np.random.default_rng(1)
        r = ks_test(rng.normal(size=400), rng.normal(size=500))
        assert r.method.endswith("asymptotic") and 0 < r.p_value <= 1

    def test_one_sample(self):
        rng = np.random.default_rng(2)
        r = ks_test(rng.normal(size=200), cdf=stats.norm.cdf)
        assert r.p_value > 0.01

    def test_empty(self):
        with pytest.raises(ValueError):
            ks_test([], [1.0])


class TestKruskalWallis:
    def test_constant_groups(self):
        r = kruskal_wallis([[2, 2], [2, 2, 2]])
        assert r.statistic == 0 and r.p_value == 1

    def test_hand_computed(self):
        # ranks 1..6, R1 = 6, R2 = 15, N = 6: H = 12/(6*7) (36/3 + 225/3) - 3*7
        h = 12 / 42 * (36 / 3 + 225 / 3) - 21
        r = kruskal_wallis([[1, 2, 3], [4, 5, 6]])
        assert r.statistic == pytest.approx(h, rel=1e-12)
        assert r.p_value == pytest.approx(stats.chi2.sf(h, 1))

    def test_ties_correction(self):
        g = [[1, 1, 2], [2, 3, 3]]
        ranks = stats.rankdata(np.concatenate(g))
        n = 6
        R = [ranks[:3].sum(), ranks[3:].sum()]
        h0 = 12 / (n * (n + 1)) * sum(r * r / 3 for r in R) - 3 * (n + 1)
        t = np.unique(np.concatenate(g), return_counts=True)[1]
        corr = 1 - np.sum(t**3 - t) / (n**3 - n)
        assert kruskal_wallis(g).statistic == pytest.approx(h0 / corr)

    def test_label_permutation_invariance(self):
        rng = np.random.default_rng(4)
        data = rng.normal(size=30)
        groups = [data[:10], data[10:20], data[20:]]
        perm = rng.permutation(3)
        a = kruskal_wallis(groups).statistic
        b = kruskal_wallis([groups[i] for i in perm]).statistic
        assert a == pytest.approx(b)

    def test_single_group(self):
        with pytest.raises(ValueError):
            kruskal_wallis([[1, 2]])


class TestProportions:
    def test_binomial_assignment_shares(self):
        r = proportion_tests(1026, 1510, 2 / 3)
        assert r.p_value == pytest.approx(0.2997, abs=0.002)

    def test_binomial_observed_equals_expected(self):
        assert proportion_tests(50, 100, 0.5).p_value == 1.0

    def test_two_sample_equal(self):
        r = proportion_tests(30, 100, (60, 200))
        assert r.statistic == 0

    def test_two_sample_against_statsmodels_formula(self):
        k1, n1, k2, n2 = 40, 120, 25, 130
        p = (k1 + k2) / (n1 + n2)
        z = (k1 / n1 - k2 / n2) / math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
        assert proportion_tests(k1, n1, (k2, n2)).statistic == pytest.approx(z)

    def test_errors(self):
        with pytest.raises(ValueError):
            proportion_tests(5, 3, 0.5)
        with pytest.raises(ValueError):
            proportion_tests(0, 0, 0.5)


class TestBetaMle:
    def test_symmetric(self):
        x = stats.beta(2, 2).rvs(3000, random_state=np.random.default_rng(0))
        f = beta_mle(x)
        assert f.shape_a == pytest.approx(f.shape_b, rel=0.1)

    def test_score_zero_at_fit(self):
        from scipy import special

        x = stats.beta(0.9805, 2.8988).rvs(1510, random_state=np.random.default_rng(1))
        f = beta_mle(x)
        a, b = f.shape_a, f.shape_b
        ga = np.mean(np.log(x)) - special.digamma(a) + special.digamma(a + b)
        gb = np.mean(np.log1p(-x)) - special.digamma(b) + special.digamma(a + b)
        assert abs(ga) < 1e-4 and abs(gb) < 1e-4
        assert f.ks_against_fit.p_value > 0.001

    def test_degenerate(self):
        with pytest.raises(ValueError):
            beta_mle(np.full(10, 0.3))


class TestLateValidity:
    def test_constant_beliefs_trivially_pass(self, planted_ds):
        import dataclasses

        ds = dataclasses.replace(planted_ds, delta_b=np.zeros(planted_ds.n))
        r = late_validity_test(ds, "below")
        assert r.p_value == 1.0 and r.extra["passes"]

    def test_direction_indicator(self, planted_ds):
        d = direction_indicator(planted_ds, "below")
        np.testing.assert_array_equal(d, planted_ds.delta_b > 0)
        d = direction_indicator(planted_ds, "above")
        np.testing.assert_array_equal(d, planted_ds.delta_b < 0)

    def test_empty_arm(self, planted_ds):
        ds = planted_ds.take(np.flatnonzero(planted_ds.z == 1))
        with pytest.raises(ValueError, match="treatment arm"):
            late_validity_test(ds, "above")

    def test_bad_group(self, planted_ds):
        with pytest.raises(ValueError):
            late_validity_test(planted_ds, "middle")

    def test_reproducible(self, planted_ds):
        a = late_validity_test(planted_ds, "above", seed=3)
        b = late_validity_test(planted_ds, "above", seed=3)
        assert a.p_value == b.p_value


def test_test_result_rejects_bad_p():
    with pytest.raises(ValueError):
        TestResult(1.0, 1, 1.5, "x")
