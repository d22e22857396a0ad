"""Hypothesis tests and resampling inference.

Wald and exogeneity tests, a plain or cluster bootstrap over arbitrary
fit-and-summarize pipelines, distributional diagnostics (Kolmogorov-Smirnov,
Kruskal-Wallis, binomial and two-proportion tests), beta ML fitting, and a
moment-inequality check of instrument validity.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, special, stats

from .domain import Dataset
from .numerics import RandomStream, two_sided_p

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: Optional[int]
    p_value: float
    method: str
    notes: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        p = self.p_value
        if not (np.isnan(p) or 0.0 <= p <= 1.0):
            raise ValueError(f"p-value {p} outside [0, 1]")

    def reject(self, level: float = 0.05) -> bool:
        return bool(self.p_value < level)

    def as_dict(self) -> dict:
        out = {"statistic": self.statistic, "df": self.df, "p_value": self.p_value, "method": self.method}
        if self.notes:
            out["notes"] = self.notes
        return out


# ---------------------------------------------------------------------------
# Wald tests


def wald_test(estimate, covariance, R=None, r=None) -> TestResult:
    """Wald test of ``R theta = r``.

    With a single restriction the signed root ``(R theta - r) / se`` is stored
    as ``extra["z"]``; its two-sided normal p-value equals the chi-square one.
    """
    theta = np.atleast_1d(np.asarray(estimate, dtype=float))
    V = np.atleast_2d(np.asarray(covariance, dtype=float))
    R = np.eye(theta.size) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    r = np.zeros(R.shape[0]) if r is None else np.atleast_1d(np.asarray(r, dtype=float))
    q = R.shape[0]
    if R.shape[1] != theta.size:
        raise ValueError("restriction matrix has the wrong number of columns")
    if np.linalg.matrix_rank(R) < q:
        raise ValueError("restrictions are linearly dependent")
    diff = R @ theta - r
    M = R @ V @ R.T
    try:
        c = linalg.cho_factor(M)
    except linalg.LinAlgError:
        raise linalg.LinAlgError("R V R' is singular; the restrictions cannot be tested") from None
    W = float(diff @ linalg.cho_solve(c, diff))
    W = max(W, 0.0)
    extra = {}
    if q == 1:
        z = float(diff[0] / math.sqrt(M[0, 0]))
        extra["z"] = z
        p = two_sided_p(z)
    else:
        p = float(stats.chi2.sf(W, q))
    return TestResult(W, q, min(1.0, p), "wald", extra=extra)


def exogeneity_test(fit) -> TestResult:
    """Wald test that the belief and participation errors are uncorrelated.

    Performed on the ``atanh rho`` scale the optimizer works on.
    """
    if getattr(fit, "estimator", None) != "cf_joint_mle" or fit.rho_hat is None:
        raise ValueError("exogeneity test needs a joint CF-MLE fit with an error correlation")
    j = fit.param_names.index("atanh_rho")
    res = wald_test(fit.params[j], fit.covariance[j, j])
    return TestResult(res.statistic, 1, res.p_value, "wald:atanh_rho", extra={"z": res.extra["z"], "rho": fit.rho_hat})


# ---------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class BootstrapSpec:
    replications: int = 1000
    cluster_keys: Optional[tuple] = None
    seed: int = 0
    drop_failed: bool = True

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")

    @property
    def label(self) -> str:
        return "cluster-bootstrap" if self.cluster_keys else "bootstrap"


class BootstrapError(RuntimeError):
    pass


@dataclass
class BootstrapResult:
    estimate: np.ndarray
    se: np.ndarray
    draws: np.ndarray
    completed: int
    failed: int
    n_clusters: int
    method: str
    failures: list = field(default_factory=list)
    completed_per_stat: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        return {
            "se": self.se.tolist(),
            "completed": self.completed,
            "failed": self.failed,
            "n_clusters": self.n_clusters,
            "method": self.method,
            "completed_per_stat": None if self.completed_per_stat is None else self.completed_per_stat.tolist(),
        }


def resample_indices(cluster_ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw clusters with replacement and return the stacked record indices."""
    uniq, inv = np.unique(cluster_ids, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    starts = np.searchsorted(inv[order], np.arange(uniq.size))
    ends = np.append(starts[1:], inv.size)
    picks = rng.integers(0, uniq.size, size=uniq.size)
    return np.concatenate([order[starts[g]:ends[g]] for g in picks])


def bootstrap(ds: Dataset, pipeline: Callable[[Dataset], np.ndarray], spec: BootstrapSpec = BootstrapSpec()) -> BootstrapResult:
    """Bootstrap standard errors of ``pipeline(dataset)``.

    Replication ``r`` draws from ``RandomStream(spec.seed, r)``, so the
    result does not depend on evaluation order.  A replication fails when
    the pipeline raises or returns no finite value at all; failures are
    counted and dropped when ``drop_failed`` (otherwise the first one is
    re-raised).  Individual NaN entries are dropped per statistic and the
    per-statistic counts kept in ``completed_per_stat``.
    """
    point = np.atleast_1d(np.asarray(pipeline(ds), dtype=float))
    keys = tuple(spec.cluster_keys) if spec.cluster_keys else ()
    ids = ds.cluster_ids(keys) if keys else np.arange(ds.n)
    n_clusters = int(np.unique(ids).size)
    draws = np.full((spec.replications, point.size), np.nan)
    ok = np.zeros(spec.replications, dtype=bool)
    failures = []
    for rep in range(spec.replications):
        rng = RandomStream(spec.seed, rep).generator()
        idx = resample_indices(ids, rng)
        try:
            val = np.atleast_1d(np.asarray(pipeline(ds.take(idx)), dtype=float))
            if val.shape != point.shape or not np.any(np.isfinite(val)):
                raise FloatingPointError("non-finite or mis-shaped replication output")
        except Exception as exc:  # noqa: BLE001 - any estimation failure counts
            if not spec.drop_failed:
                raise
            failures.append((rep, f"{type(exc).__name__}: {exc}"))
            continue
        draws[rep] = val
        ok[rep] = True
    done = int(ok.sum())
    if done == 0:
        raise BootstrapError(f"all {spec.replications} bootstrap replications failed; first: {failures[0][1]}")
    if failures:
        logger.info("bootstrap: %d of %d replications failed and were dropped", len(failures), spec.replications)
    kept = draws[ok]
    # a statistic can be undefined in a replication that otherwise worked
    # (e.g. the coefficient of a fixed-effect cell absent from the resample);
    # its SE then uses the replications where it is defined
    per_stat = np.isfinite(kept).sum(axis=0)
    with warnings.catch_warnings(), np.errstate(invalid="ignore", divide="ignore"):
        warnings.simplefilter("ignore", RuntimeWarning)
        se = np.where(per_stat > 1, np.nanstd(kept, axis=0, ddof=1) if done > 1 else 0.0, np.nan)
    if done == 1:
        se = np.zeros(point.size)
    return BootstrapResult(point, se, kept, done, len(failures), n_clusters, spec.label, failures, per_stat)


# ---------------------------------------------------------------------------
# distributional diagnostics


def _ks_exact_two_sample(x: np.ndarray, y: np.ndarray, d_obs: float) -> float:
    """P(D >= d_obs) over all equally likely splits of the pooled sample.

    Counts lattice paths; the distance is only checked where the pooled
    sorted value changes, which makes the count correct with ties.
    """
    n, m = x.size, y.size
    pooled = np.concatenate([x, y])
    vals = np.sort(pooled)
    # positions k (number of pooled points consumed) at which D is evaluated
    checks = set((np.flatnonzero(np.diff(vals) > 0) + 1).tolist())
    eps = 1e-12
    # inside[i][j]: number of paths reaching (i, j) without a violation
    prev = [0] * (m + 1)
    for i in range(n + 1):
        cur = [0] * (m + 1)
        for j in range(m + 1):
            if i == 0 and j == 0:
                cur[j] = 1
                continue
            cnt = (prev[j] if i > 0 else 0) + (cur[j - 1] if j > 0 else 0)
            if (i + j) in checks and abs(i / n - j / m) >= d_obs - eps:
                cnt = 0
            cur[j] = cnt
        prev = cur
    total = math.comb(n + m, n)
    return float(min(1.0, max(0.0, 1.0 - prev[m] / total)))


def ks_test(sample_a, sample_b=None, cdf: Optional[Callable] = None, exact_threshold: int = 10) -> TestResult:
    """Kolmogorov-Smirnov test.

    Two-sample when ``sample_b`` is given; the p-value is exact when the
    smaller sample has at most ``exact_threshold`` points, otherwise from the
    asymptotic Kolmogorov distribution.  One-sample against ``cdf``
    otherwise.
    """
    a = np.asarray(sample_a, dtype=float).ravel()
    if a.size == 0:
        raise ValueError("empty sample")
    if sample_b is None:
        if cdf is None:
            raise ValueError("supply a second sample or a reference CDF")
        res = stats.kstest(a, cdf)
        return TestResult(float(res.statistic), None, float(res.pvalue), "ks-one-sample")
    b = np.asarray(sample_b, dtype=float).ravel()
    if b.size == 0:
        raise ValueError("empty sample")
    grid = np.union1d(a, b)
    Fa = np.searchsorted(np.sort(a), grid, side="right") / a.size
    Fb = np.searchsorted(np.sort(b), grid, side="right") / b.size
    D = float(np.max(np.abs(Fa - Fb)))
    if D == 0.0:
        return TestResult(0.0, None, 1.0, "ks-two-sample")
    if min(a.size, b.size) <= exact_threshold:
        p = _ks_exact_two_sample(a, b, D)
        method = "ks-two-sample-exact"
    else:
        en = a.size * b.size / (a.size + b.size)
        p = float(stats.kstwobign.sf(math.sqrt(en) * D))
        method = "ks-two-sample-asymptotic"
    return TestResult(D, None, min(1.0, p), method)


def kruskal_wallis(groups: Sequence) -> TestResult:
    """Rank test of equal populations with the ties correction."""
    arrs = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(arrs) < 2:
        raise ValueError("need at least two groups")
    if any(a.size == 0 for a in arrs):
        raise ValueError("empty group")
    pooled = np.concatenate(arrs)
    if np.all(pooled == pooled[0]):
        return TestResult(0.0, len(arrs) - 1, 1.0, "kruskal-wallis", notes="all values tied")
    res = stats.kruskal(*arrs)
    return TestResult(float(res.statistic), len(arrs) - 1, float(res.pvalue), "kruskal-wallis",
                      notes="ties correction applied")


def binomial_test(successes: int, trials: int, p0: float) -> TestResult:
    """Exact two-sided test; outcomes no more likely than the observed one
    are summed (minimum-likelihood method)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    res = stats.binomtest(int(successes), int(trials), float(p0), alternative="two-sided")
    return TestResult(float(successes), None, float(min(1.0, res.pvalue)), "binomial-exact",
                      extra={"expected": trials * p0})


def two_proportion_test(k1: int, n1: int, k2: int, n2: int) -> TestResult:
    """Pooled z-test of equal proportions."""
    for k, n in ((k1, n1), (k2, n2)):
        if n < 1:
            raise ValueError("trials must be >= 1")
        if not 0 <= k <= n:
            raise ValueError("successes must lie in [0, trials]")
    p1, p2 = k1 / n1, k2 / n2
    pool = (k1 + k2) / (n1 + n2)
    var = pool * (1 - pool) * (1 / n1 + 1 / n2)
    if var == 0:
        return TestResult(0.0, None, 1.0, "two-proportion-z", notes="pooled proportion is 0 or 1")
    z = (p1 - p2) / math.sqrt(var)
    return TestResult(z, None, two_sided_p(z), "two-proportion-z")


def proportion_tests(successes, trials, other=None) -> TestResult:
    """Binomial test against ``other`` if it is a probability, two-proportion
    z-test if it is a ``(successes, trials)`` pair."""
    if other is None:
        raise ValueError("give a null proportion or a second (successes, trials) sample")
    if np.ndim(other) == 0:
        return binomial_test(successes, trials, float(other))
    k2, n2 = other
    return two_proportion_test(successes, trials, int(k2), int(n2))


@dataclass
class BetaFit:
    shape_a: float
    shape_b: float
    se_a: float
    se_b: float
    loglik: float
    n: int
    ks_against_fit: TestResult

    @property
    def mean(self) -> float:
        return self.shape_a / (self.shape_a + self.shape_b)

    def as_dict(self) -> dict:
        return {
            "shape_a": self.shape_a, "shape_b": self.shape_b, "se_a": self.se_a, "se_b": self.se_b,
            "loglik": self.loglik, "n": self.n, "mean": self.mean, "ks": self.ks_against_fit.as_dict(),
        }


def beta_mle(sample, boundary: str = "shrink") -> BetaFit:
    """Maximum likelihood fit of a standard beta distribution.

    Values at 0 or 1 are pulled inside by the usual ``(y (n-1) + 1/2) / n``
    shrink unless ``boundary="error"``.
    """
    x = np.asarray(sample, dtype=float).ravel()
    n = x.size
    if n < 2 or np.all(x == x[0]):
        raise ValueError("degenerate sample: need at least two distinct values")
    if np.any((x < 0) | (x > 1)):
        raise ValueError("sample values must lie in [0, 1]")
    if np.any((x == 0) | (x == 1)):
        if boundary == "error":
            raise ValueError("sample contains 0 or 1")
        x = (x * (n - 1) + 0.5) / n
    a, b, _, _ = stats.beta.fit(x, floc=0, fscale=1)
    ll = float(np.sum(stats.beta.logpdf(x, a, b)))
    t_ab = special.polygamma(1, a + b)
    info = n * np.array([[special.polygamma(1, a) - t_ab, -t_ab], [-t_ab, special.polygamma(1, b) - t_ab]])
    cov = np.linalg.inv(info)
    ks = ks_test(x, cdf=stats.beta(a, b).cdf)
    return BetaFit(float(a), float(b), float(np.sqrt(cov[0, 0])), float(np.sqrt(cov[1, 1])), ll, n, ks)


# ---------------------------------------------------------------------------
# instrument validity


def direction_indicator(ds: Dataset, group: str) -> np.ndarray:
    """1 where the belief moved the way the treatment pushes it in ``group``:
    up when the reference belief is below the signal, down when above."""
    return (ds.delta_b > 0).astype(int) if group == "below" else (ds.delta_b < 0).astype(int)


def _late_moments(y, d, z):
    """Four inequality moments m_k <= 0 and their standard errors."""
    z1 = z == 1
    z0 = ~z1
    p1, p0 = z1.mean(), z0.mean()
    ms, infl = [], []
    for yv in (0, 1):
        a1 = ((y == yv) & (d == 1)).astype(float)
        a0 = ((y == yv) & (d == 0)).astype(float)
        # P(Y=y, D=1 | Z=0) - P(Y=y, D=1 | Z=1)
        # P(Y=y, D=0 | Z=1) - P(Y=y, D=0 | Z=0)
        for arr, sign in ((a1, -1.0), (a0, 1.0)):
            e1 = arr[z1].mean()
            e0 = arr[z0].mean()
            ms.append(sign * (e1 - e0))
            # influence function of the difference of conditional means
            psi = sign * (z1 * (arr - e1) / p1 - z0 * (arr - e0) / p0)
            infl.append(psi)
    infl = np.array(infl)
    n = y.size
    se = infl.std(axis=1, ddof=0) / math.sqrt(n)
    return np.array(ms), se


def late_validity_test(
    ds: Dataset,
    group: str,
    replications: int = 500,
    seed: int = 0,
    level: float = 0.10,
    indicator: Optional[Callable[[Dataset, str], np.ndarray]] = None,
) -> TestResult:
    """Test the testable implications of instrument validity within a group.

    The endogenous variable is binarized by ``indicator`` (default:
    :func:`direction_indicator`).  With ``D`` that indicator, ``Y`` the
    participation decision and ``Z`` treatment, validity and monotonicity
    imply for ``y`` in {0, 1}::

        P(Y=y, D=1 | Z=0) <= P(Y=y, D=1 | Z=1)
        P(Y=y, D=0 | Z=1) <= P(Y=y, D=0 | Z=0)

    The statistic is the largest studentized violation.  Its critical value
    comes from a multiplier bootstrap restricted to the inequalities that are
    close to binding (a generalized moment-selection approximation of the
    intersection-bounds test, not the full local-kernel procedure).
    ``extra["passes"]`` is True when the p-value is at least ``level``.
    """
    if group not in ("below", "above"):
        raise ValueError("group must be 'below' or 'above'")
    mask = ds.c == (0 if group == "below" else 1)
    if not mask.any():
        raise ValueError(f"group {group!r} is empty")
    sub = ds.take(np.flatnonzero(mask))
    z = sub.z.astype(int)
    if z.min() == z.max():
        raise ValueError(f"group {group!r} has an empty treatment arm")
    d = (indicator or direction_indicator)(sub, group)
    y = sub.a.astype(int)
    n = y.size
    note = "moment-selection bootstrap approximation to the intersection-bounds test"
    if d.min() == d.max():
        return TestResult(0.0, None, 1.0, "late-validity", notes="endogenous indicator constant; no testable content",
                          extra={"passes": True, "n": n})
    m, se = _late_moments(y, d, z)
    active = se > 0
    if not active.any():
        return TestResult(0.0, None, 1.0, "late-validity", notes="all moments degenerate", extra={"passes": True, "n": n})
    t = np.where(active, m / np.where(active, se, 1.0), -np.inf)
    T = float(max(np.max(t), 0.0))

    # recentred multiplier bootstrap of the studentized moments
    rng = RandomStream(seed, 0).generator()
    z1 = z == 1
    z0 = ~z1
    p1, p0 = z1.mean(), z0.mean()
    infl = []
    for yv in (0, 1):
        for dv, sign in ((1, -1.0), (0, 1.0)):
            arr = ((y == yv) & (d == dv)).astype(float)
            infl.append(sign * (z1 * (arr - arr[z1].mean()) / p1 - z0 * (arr - arr[z0].mean()) / p0))
    infl = np.array(infl)[active]
    se_a = se[active]
    xi = rng.standard_normal((replications, n))
    boot_t = (xi @ infl.T) / n / se_a  # replications x active moments
    # moment selection: keep inequalities within a slack of binding
    kappa = math.sqrt(2.0 * math.log(math.log(max(n, 16))))
    keep = t[active] >= -kappa
    if not keep.any():
        return TestResult(T, None, 1.0, "late-validity", notes=note + "; no inequality near binding",
                          extra={"passes": True, "moments": m.tolist(), "se": se.tolist(), "n": n})
    boot_max = np.maximum(boot_t[:, keep].max(axis=1), 0.0)
    p = float((np.sum(boot_max >= T) + 1) / (replications + 1)) if T > 0 else 1.0
    return TestResult(
        T, None, min(1.0, p), "late-validity", notes=note,
        extra={"passes": p >= level, "moments": m.tolist(), "se": se.tolist(), "selected": int(keep.sum()), "n": n},
    )
