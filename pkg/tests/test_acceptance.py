"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v -s`` to see the lines inline; they
are also repeated in the terminal summary.  Criterion 9 needs the published
panel and runs only when ``STRATPART_OSF_CSV`` (plus ``STRATPART_OSF_SIGNALS``
or ``STRATPART_OSF_INTENTS``) point at the files.
"""

import os
import time
import warnings

import numpy as np
import pytest
from scipy import stats

from stratpart import kernels
from stratpart.belief import _fp_derivs, ate_by_group, beta_loglik_derivs, fit_fractional_probit, fit_ols_belief
from stratpart.belief import transformed_response
from stratpart.inference import (
    BootstrapSpec,
    beta_mle,
    bootstrap,
    exogeneity_test,
    late_validity_test,
    proportion_tests,
)
from stratpart.numerics import RandomStream, finite_diff_grad, std_normal_cdf
from stratpart.participation import ape, fit_cf_joint_arrays, fit_cf_joint_mle, fit_probit, _probit
from stratpart.presets import paper2019
from stratpart.simulator import free_riding_offset, generate_population, solve_equilibrium

RESULTS = {}

BETA_TRUE = -3.3062


def record(num, ok, detail):
    line = f"ACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS[num] = line
    print(line)
    return ok


def population(seed, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_population(paper2019(seed, **kw)).dataset


# --------------------------------------------------------------------------- 1


def rel_err(g, fd):
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))


def test_criterion_1_gradient_soundness():
    t0 = time.perf_counter()
    ds = population(1)
    rng = RandomStream(1, 1).generator()
    W = np.column_stack([np.ones(ds.n), ds.z, ds.c, ds.z * ds.c]).astype(float)
    y_frac = transformed_response(ds)
    pf = fit_probit(ds)
    X = pf.design.matrix(ds)
    a = ds.a.astype(float)
    w = np.ones(ds.n)
    joint = fit_cf_joint_mle(ds)
    base = {
        "probit": pf.params,
        "fractional_probit": fit_fractional_probit(ds).params,
        "beta_regression": np.array([0.0, 0.1, -0.01, -0.12, 3.9]),
        "cf_joint_mle": joint.params,
    }
    funcs = {
        "probit": (lambda p: kernels.probit_derivs(X, a, w, p, 1)[:2]),
        "fractional_probit": (lambda p: _fp_derivs(W, y_frac, p, 1)[:2]),
        "beta_regression": (lambda p: beta_loglik_derivs(W, y_frac, p, 1)[:2]),
        "cf_joint_mle": (lambda p: kernels.cf_joint_derivs(X, W, a, ds.delta_b, w, p, 1)[:2]),
    }
    worst = {}
    for name, fn in funcs.items():
        errs = []
        for _ in range(20):
            p = base[name] + rng.normal(0, 0.1, base[name].size)
            _, g = fn(p)
            fd = finite_diff_grad(lambda v: fn(v)[0], p)
            errs.append(rel_err(g, fd))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-6 for v in worst.values()) and elapsed < 10
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s (limit 10s)"
    assert record(1, ok, detail), detail


# --------------------------------------------------------------------------- 2


def grid_search(loglik, center, half_width, points=11, final_step=1e-3, final_half=8, starts=4):
    """Brute-force lattice oracle.  A first lattice over the whole box
    supplies ``starts`` candidates; each is refined by re-centred, narrowing
    lattices down to a spacing of 1e-2, and the best then seeds an
    exhaustive lattice with spacing ``final_step`` that is re-centred until
    its winner is interior."""
    center = np.asarray(center, dtype=float)
    hw0 = np.asarray(half_width, dtype=float)

    def scan(axes, k=1):
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, center.size)
        vals = np.concatenate([loglik(c) for c in np.array_split(grid, max(1, grid.shape[0] // 50_000))])
        vals = np.where(np.isfinite(vals), vals, -np.inf)
        top = np.argsort(vals)[::-1][:k]
        return grid[top], vals[top]

    def lattice(c, h):
        return [np.linspace(ci - hi, ci + hi, points) for ci, hi in zip(c, h)]

    candidates, _ = scan(lattice(center, hw0), starts)
    best, best_val = None, -np.inf
    for c in candidates:
        hw = hw0.copy()
        while np.any(2 * hw / (points - 1) > 1e-2):
            hw = np.maximum(hw / 2, 1e-2 * (points - 1) / 2)
            (c,), (val,) = scan(lattice(c, hw))
        if val > best_val:
            best, best_val = c, val
    offsets = np.arange(-final_half, final_half + 1) * final_step
    for _ in range(200):
        (new,), _ = scan([ci + offsets for ci in best])
        interior = np.all(np.abs(new - best) < (final_half - 0.5) * final_step)
        best = new
        if interior:
            break
    return best


def probit_ll_grid(X, y):
    def f(B):
        idx = B @ X.T
        return np.sum(np.where(y == 1, stats.norm.logcdf(idx), stats.norm.logcdf(-idx)), axis=1)

    return f


def joint_ll_grid(x, y, db, z):
    """Independent joint likelihood for X = (delta_b), W = (z): the
    parameters are (beta, theta, log sigma, atanh rho)."""

    def f(P):
        b, t, tau, kap = P.T[:, :, None]
        sig, rho = np.exp(tau), np.tanh(kap)
        e = db[None, :] - t * z[None, :]
        idx = (b * x[None, :] + rho * e / sig) / np.sqrt(1 - rho**2)
        part = np.where(y[None, :] == 1, stats.norm.logcdf(idx), stats.norm.logcdf(-idx))
        return np.sum(stats.norm.logpdf(e, scale=sig) + part, axis=1)

    return f


def small_instances(count=3):
    """Eight-row draws with a binary instrument.  A draw is kept only when
    the MLEs exist: both outcomes present, no separation, an interior joint
    optimum (|rho| < .95) and converged fits."""
    found = []
    seed = 0
    while len(found) < count:
        rng = RandomStream(77, seed).generator()
        seed += 1
        z = np.repeat([0.0, 1.0], 4)
        e = rng.normal(0, 0.1, 8)
        db = -0.2 + 0.3 * z + e
        u = 0.45 * e / 0.1 + np.sqrt(1 - 0.45**2) * rng.standard_normal(8)
        y = (-3.3 * db + u > 0).astype(float)
        X = np.column_stack([np.ones(8), db])
        try:
            pr = _probit(X, y, ["const", "delta_b"])
            res = fit_cf_joint_arrays(db[:, None], z[:, None], y, db)
        except Exception:
            continue
        if not (pr.converged and res.converged) or abs(np.tanh(res.argmax[-1])) > 0.95:
            continue
        if np.max(np.abs(res.argmax)) > 15:
            continue
        found.append((X, y, db, z, pr.argmax, res.argmax))
    return found


def test_criterion_2_small_instance_grid_oracle():
    worst_p, worst_j, ll_gap = 0.0, 0.0, -np.inf
    for X, y, db, z, pr, jt in small_instances():
        g = grid_search(probit_ll_grid(X, y), [0.0, 0.0], [5.0, 40.0], points=41)
        worst_p = max(worst_p, float(np.max(np.abs(g - pr))))
        f = joint_ll_grid(db, y, db, z)
        g = grid_search(f, [0.0, 0.0, float(np.log(db.std())), 0.0], [20.0, 1.0, 2.0, 2.5])
        worst_j = max(worst_j, float(np.max(np.abs(g - jt))))
        ll_grid, ll_mle = f(np.array([g, jt]))
        ll_gap = max(ll_gap, float(ll_grid - ll_mle))
    ok = worst_p <= 2e-3 and worst_j <= 2e-3
    detail = (f"max |MLE - grid| probit {worst_p:.1e}, joint CF-MLE {worst_j:.1e} (limit 2e-3); "
              f"best grid loglik minus MLE loglik {ll_gap:.1e}")
    assert record(2, ok, detail), detail


# --------------------------------------------------------------------------- 3


@pytest.mark.slow
def test_criterion_3_planted_recovery():
    t0 = time.perf_counter()
    covered = biased = 0
    for seed in range(100):
        ds = population(seed)
        jf = fit_cf_joint_mle(ds)
        covered += abs(jf.beta_hat - BETA_TRUE) <= 1.959963984540054 * jf.se("delta_b")
        pf = fit_probit(ds)
        biased += abs(pf.beta_hat - BETA_TRUE) > 2 * pf.se("delta_b")
    elapsed = time.perf_counter() - t0
    ok = covered >= 90 and biased >= 80 and elapsed < 300
    detail = (f"joint CF-MLE 95% CI covers beta in {covered}/100 (need >= 90); naive probit off by > 2 SE "
              f"in {biased}/100 (need >= 80); {elapsed:.0f}s (limit 300s)")
    assert record(3, ok, detail), detail


# --------------------------------------------------------------------------- 4


def test_criterion_4_ate_identities():
    worst_id, worst_fp = 0.0, 0.0
    for seed in range(10):
        ds = population(seed)
        ols = fit_ols_belief(ds)
        lin = ate_by_group(ols)
        worst_id = max(worst_id, abs(lin.below.estimate - ols.theta_hat[1]),
                       abs(lin.above.estimate - ols.theta_hat[1] - ols.theta_hat[3]))
        fp = ate_by_group(fit_fractional_probit(ds))
        worst_fp = max(worst_fp, abs(fp.below.estimate - lin.below.estimate),
                       abs(fp.above.estimate - lin.above.estimate))
    ok = worst_id <= 4 * np.finfo(float).eps and worst_fp < 0.005
    detail = f"linear ATE vs theta max diff {worst_id:.1e}; fractional probit vs linear max diff {worst_fp:.1e} (limit .005)"
    assert record(4, ok, detail), detail


# --------------------------------------------------------------------------- 5

LATE_VIOLATION = 0.8  # direct effect of treatment on the participation index


@pytest.mark.slow
def test_criterion_5_test_calibration():
    t0 = time.perf_counter()
    exo = 0
    for seed in range(1000, 1200):
        exo += exogeneity_test(fit_cf_joint_mle(population(seed, rho=0.0))).p_value < 0.05
    late_valid = {"below": 0, "above": 0}
    late_viol = {"below": 0, "above": 0}
    for seed in range(200):
        ok_ds = population(seed)
        bad_ds = population(seed, direct_effect=LATE_VIOLATION)
        for g in late_valid:
            late_valid[g] += not late_validity_test(ok_ds, g, replications=500, seed=seed).extra["passes"]
            late_viol[g] += not late_validity_test(bad_ds, g, replications=500, seed=seed).extra["passes"]
    elapsed = time.perf_counter() - t0
    size = exo / 200
    ok = (0.03 <= size <= 0.07
          and all(v / 200 <= 0.13 for v in late_valid.values())
          and all(v / 200 >= 0.50 for v in late_viol.values())
          and elapsed < 900)
    detail = (f"exogeneity size {size:.3f} (need .05 +- .02); LATE rejection valid "
              f"below {late_valid['below'] / 200:.3f} above {late_valid['above'] / 200:.3f} (need <= .13), "
              f"violated below {late_viol['below'] / 200:.3f} above {late_viol['above'] / 200:.3f} (need >= .50); "
              f"{elapsed:.0f}s (limit 900s)")
    assert record(5, ok, detail), detail


# --------------------------------------------------------------------------- 6


def test_criterion_6_beta_fit():
    x = stats.beta(0.9805, 2.8988).rvs(1510, random_state=RandomStream(0, 0).generator())
    f = beta_mle(x)
    ok = abs(f.shape_a - 0.9805) <= 0.1 and abs(f.shape_b - 2.8988) <= 0.1 and abs(f.mean - x.mean()) <= 0.01
    detail = (f"a {f.shape_a:.4f} (true .9805), b {f.shape_b:.4f} (true 2.8988), tolerance .1; "
              f"fitted mean {f.mean:.4f} vs sample mean {x.mean():.4f} (tolerance .01)")
    assert record(6, ok, detail), detail


# --------------------------------------------------------------------------- 7


def test_criterion_7_equilibrium_offset():
    alpha = -1.0855
    r = free_riding_offset(alpha, 0.1, BETA_TRUE)
    shares = [free_riding_offset(alpha, 0.1, b).offset_share for b in (-1.0, -2.0, BETA_TRUE)]
    residuals = []
    for a_ in (alpha, alpha + 0.1):
        eq = solve_equilibrium(a_, BETA_TRUE, tol=1e-12)
        residuals.append(abs(float(std_normal_cdf(a_ + BETA_TRUE * eq.b_star)) - eq.b_star))
    ok = (0 < r.equilibrium_response < r.naive_response and shares[0] < shares[1] < shares[2]
          and max(residuals) <= 1e-10)
    detail = (f"naive {r.naive_response:.5f}, equilibrium {r.equilibrium_response:.5f}; offset shares "
              f"{', '.join(f'{s:.4f}' for s in shares)} for beta -1, -2, -3.3062; max residual {max(residuals):.1e}")
    assert record(7, ok, detail), detail


# --------------------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_8_inference_plumbing():
    p = proportion_tests(1026, 1510, 2 / 3).p_value
    ds = population(1)
    jf = fit_cf_joint_mle(ds)
    delta = ape(jf, ds)
    boot = bootstrap(ds, lambda d: [ape(fit_cf_joint_mle(d), d).estimate], BootstrapSpec(1000, seed=8))
    ratio = boot.se[0] / delta.se
    ok = abs(p - 0.2997) <= 0.002 and abs(ratio - 1) <= 0.15
    detail = (f"binomial p {p:.4f} (target .2997 +- .002); overall APE SE delta {delta.se:.4f} vs bootstrap "
              f"{boot.se[0]:.4f} (ratio {ratio:.3f}, need within 15%; {boot.completed} reps)")
    assert record(8, ok, detail), detail


# --------------------------------------------------------------------------- 9


OSF = os.environ.get("STRATPART_OSF_CSV")


@pytest.mark.skipif(not OSF, reason="published panel not supplied (set STRATPART_OSF_CSV)")
def test_criterion_9_conditional_reproduction():
    from stratpart.cli import PUBLISHED, compare_published, run_estimate
    from stratpart.domain import load_dataset

    ds = load_dataset(
        OSF,
        signals=os.environ.get("STRATPART_OSF_SIGNALS"),
        intents=os.environ.get("STRATPART_OSF_INTENTS"),
        belief_scale=os.environ.get("STRATPART_OSF_BELIEF_SCALE", "percent"),
    )
    results = run_estimate(ds, ["cf_joint_mle"], [0.0], None)
    rows = compare_published(results, {k: v[1] for k, v in PUBLISHED.items()})
    ok = all(r["match"] for r in rows.values())
    detail = "; ".join(f"{k} {r['reproduced']} vs {r['published']}" for k, r in rows.items())
    assert record(9, ok, detail), detail
