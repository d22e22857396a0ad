import warnings

import numpy as np
import pytest
from scipy import stats

from stratpart.numerics import std_normal_cdf
from stratpart.presets import get_preset, paper2019
from stratpart.simulator import (
    ClippingWarning,
    PlantedTruth,
    free_riding_offset,
    generate_population,
    read_truth,
    solve_equilibrium,
    write_truth,
)


class TestGeneration:
    def test_deterministic(self):
        a = generate_population(paper2019(4)).dataset
        b = generate_population(paper2019(4)).dataset
        for col in ("b_prior", "b_post", "b_ref", "z", "a", "location", "enroll_date"):
            np.testing.assert_array_equal(getattr(a, col), getattr(b, col))

    def test_beliefs_in_unit_interval(self, planted_ds):
        for col in (planted_ds.b_prior, planted_ds.b_post, planted_ds.b_ref):
            assert col.min() >= 0 and col.max() <= 1

    @pytest.mark.parametrize("seed", range(5))
    def test_participation_share(self, seed):
        ds = generate_population(paper2019(seed)).dataset
        assert abs(ds.a.mean() - 0.11) <= 0.02

    def test_group_contrasts_recover_theta(self):
        # pool seeds for a tight law-of-large-numbers check
        diffs = {"below": [], "above": []}
        for seed in range(20):
            ds = generate_population(paper2019(seed)).dataset
            for g, cv in (("below", 0), ("above", 1)):
                m = ds.c == cv
                diffs[g].append(ds.delta_b[m & (ds.z == 1)].mean() - ds.delta_b[m & (ds.z == 0)].mean())
        for g, target in (("below", 0.0425), ("above", 0.0425 - 0.0979)):
            d = np.asarray(diffs[g])
            assert abs(d.mean() - target) < 3 * d.std(ddof=1) / np.sqrt(d.size)

    def test_monotone_direction(self, planted_ds):
        ds = planted_ds
        below, above = ds.c == 0, ds.c == 1
        t_b = stats.ttest_ind(ds.delta_b[below & (ds.z == 1)], ds.delta_b[below & (ds.z == 0)], alternative="greater")
        t_a = stats.ttest_ind(ds.delta_b[above & (ds.z == 1)], ds.delta_b[above & (ds.z == 0)], alternative="less")
        assert t_b.pvalue < 0.01 and t_a.pvalue < 0.01

    def test_outcome_codes_consistent(self, planted_ds):
        np.testing.assert_array_equal(planted_ds.raw_outcome_code == 1, planted_ds.a == 1)

    def test_null_dgp_independent(self):
        ps = []
        for seed in range(30):
            cfg = paper2019(seed, theta=(0.0, 0.0, 0.0, 0.0), beta=0.0, rho=0.0)
            ds = generate_population(cfg).dataset
            table = np.array([[np.sum((ds.z == i) & (ds.a == j)) for j in (0, 1)] for i in (0, 1)])
            ps.append(stats.chi2_contingency(table)[1])
        assert stats.kstest(ps, "uniform").pvalue > 0.001

    def test_clip_mode_warns_when_mass_clipped(self):
        cfg = paper2019(0, sigma_e=0.5, belief_bounds="clip")
        with pytest.warns(ClippingWarning):
            pop = generate_population(cfg)
        assert pop.clip_counts["posterior_clipped"] > 0.05 * cfg.n

    def test_custom_psi(self):
        cfg = paper2019(0, psi=lambda d: 0.3 * d)
        ds = generate_population(cfg).dataset
        assert ds.n == 1510

    def test_config_errors(self):
        with pytest.raises(ValueError):
            paper2019(0, treat_prob=1.0)
        with pytest.raises(ValueError):
            paper2019(0, rho=1.0)
        with pytest.raises(KeyError):
            get_preset("nope")

    def test_truth_sidecar_roundtrip(self, tmp_path):
        cfg = paper2019(2)
        write_truth(cfg.truth, tmp_path / "t.json", cfg)
        assert read_truth(tmp_path / "t.json").as_dict() == cfg.truth.as_dict()


class TestEquilibrium:
    def test_no_interaction(self):
        r = solve_equilibrium(-0.4, 0.0)
        assert r.b_star == std_normal_cdf(-0.4)

    def test_published_beta_at_zero_alpha(self):
        r = solve_equilibrium(0.0, -3.3062, tol=1e-12)
        assert abs(std_normal_cdf(-3.3062 * r.b_star) - r.b_star) <= 1e-10
        assert r.unique

    @pytest.mark.parametrize("beta", [-0.5, -2.0, -6.0])
    def test_symmetric_case(self, beta):
        r = solve_equilibrium(-beta / 2, beta, tol=1e-12)
        assert r.b_star == pytest.approx(0.5, abs=1e-10)
        assert r.residual <= 1e-12

    def test_unique_from_two_brackets(self):
        from stratpart.simulator import _bisect

        h = lambda b: float(std_normal_cdf(-1.0855 - 3.3062 * b)) - b
        a = _bisect(h, 0.0, 1.0, 1e-13)[0]
        b = _bisect(h, 1e-9, 1.0 - 1e-3, 1e-13)[0]
        assert abs(a - b) <= 10 * 1e-13 * 10

    def test_complements_return_all_fixed_points(self):
        r = solve_equilibrium(-2.0, 4.0)
        assert len(r.fixed_points) == 3 and not r.unique
        for b in r.fixed_points:
            assert abs(std_normal_cdf(-2.0 + 4.0 * b) - b) < 1e-10

    def test_bad_tol(self):
        with pytest.raises(ValueError):
            solve_equilibrium(0.0, -1.0, tol=0)


class TestFreeRiding:
    def test_partial_offset(self):
        r = free_riding_offset(-1.0855, 0.1, -3.3)
        assert 0 < r.equilibrium_response < r.naive_response

    def test_vanishes_without_interaction(self):
        r = free_riding_offset(-1.0, 0.1, -1e-8)
        assert r.offset_share == pytest.approx(0.0, abs=1e-6)

    @pytest.mark.parametrize("alpha", np.linspace(-2, 1, 7))
    @pytest.mark.parametrize("beta", [-0.5, -1.0, -3.3062, -8.0])
    def test_partial_offset_everywhere(self, alpha, beta):
        r = free_riding_offset(alpha, 0.1, beta)
        assert 0 < r.equilibrium_response < r.naive_response

    def test_errors(self):
        with pytest.raises(ValueError):
            free_riding_offset(0.0, 0.1, 0.5)
        with pytest.raises(ValueError):
            free_riding_offset(0.0, 0.0, -1.0)
