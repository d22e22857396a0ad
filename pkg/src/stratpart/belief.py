"""Belief-updating regressions of the belief change on treatment and condition.

The mean belief change in each (condition, treatment) cell is modelled as
``L(t0 + t1*z + t2*c + t3*z*c)`` under three links:

* ``linear``: OLS on the belief change itself;
* ``fractional_probit``: Bernoulli quasi-likelihood with probit link on the
  rescaled response ``(delta_b + 1) / 2``;
* ``beta_probit``: beta regression of the same response with probit mean
  link and log precision link.

Group treatment effects are differences of predicted margins; for the two
non-linear links they can be mapped back to the belief-change scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .domain import Dataset, fixed_effect_design
from .numerics import Estimate, maximize_loglik, std_normal_pdf

LINKS = ("linear", "fractional_probit", "beta_probit")
THETA_NAMES = ("const", "z", "c", "z*c")


class DesignError(ValueError):
    pass


class DegenerateScaleWarning(RuntimeWarning):
    pass


@dataclass
class BeliefUpdateFit:
    link: str
    theta_hat: np.ndarray
    covariance: np.ndarray
    params: np.ndarray
    param_names: list
    full_covariance: np.ndarray
    n: int
    loglik_or_rss: float
    residuals: Optional[np.ndarray] = None
    scale_hat: Optional[float] = None
    scale_se: Optional[float] = None
    cov_type: str = "classical"
    converged: bool = True
    fe_rows: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def root_mse(self) -> Optional[float]:
        return self.extra.get("root_mse")


@dataclass(frozen=True)
class GroupATE:
    below: Estimate
    above: Estimate
    scale: str = "delta_b"

    def as_dict(self) -> dict:
        return {"below": self.below.as_dict(), "above": self.above.as_dict(), "scale": self.scale}


def belief_design(ds: Dataset, fixed_effects: Sequence[str] = ()) -> tuple:
    z = ds.z.astype(float)
    c = ds.c.astype(float)
    W = np.column_stack([np.ones(ds.n), z, c, z * c])
    names = list(THETA_NAMES)
    fe = None
    if fixed_effects:
        design = fixed_effect_design(ds, fixed_effects)
        fe = design.matrix(ds)
        W = np.column_stack([W, fe])
        names += design.names
    return W, names, fe


def _check_rank(W: np.ndarray, names: Sequence[str]) -> None:
    rank = 0
    for j in range(W.shape[1]):
        r = np.linalg.matrix_rank(W[:, : j + 1])
        if r == rank:
            raise DesignError(f"design is rank deficient: regressor {names[j]!r} is degenerate "
                              "(constant or collinear with earlier columns)")
        rank = r


def _precheck(ds: Dataset, W, names) -> None:
    if ds.n < 5:
        raise DesignError(f"need at least 5 records, got {ds.n}")
    _check_rank(W, names)


def fit_ols_belief(ds: Dataset, fixed_effects: Sequence[str] = ()) -> BeliefUpdateFit:
    """Least squares with the classical covariance ``s^2 (W'W)^-1``."""
    W, names, fe = belief_design(ds, fixed_effects)
    _precheck(ds, W, names)
    y = ds.delta_b
    beta, *_ = np.linalg.lstsq(W, y, rcond=None)
    resid = y - W @ beta
    n, p = W.shape
    rss = float(resid @ resid)
    s2 = rss / (n - p) if n > p else 0.0
    cov = s2 * np.linalg.inv(W.T @ W)
    return BeliefUpdateFit(
        link="linear",
        theta_hat=beta[:4].copy(),
        covariance=cov[:4, :4].copy(),
        params=beta,
        param_names=names,
        full_covariance=cov,
        n=n,
        loglik_or_rss=rss,
        residuals=resid,
        cov_type="classical",
        fe_rows=fe,
        extra={"root_mse": float(np.sqrt(s2)), "r2": 1.0 - rss / float(((y - y.mean()) ** 2).sum() or np.inf)},
    )


def transformed_response(ds: Dataset) -> np.ndarray:
    return (ds.delta_b + 1.0) / 2.0


def _fp_derivs(W, y, theta, order=2):
    eta = W @ theta
    ll = float(y @ special.log_ndtr(eta) + (1.0 - y) @ special.log_ndtr(-eta))
    if order == 0:
        return ll, None, None
    lp = np.exp(-0.5 * eta**2 - 0.5 * np.log(2 * np.pi) - special.log_ndtr(eta))
    lm = np.exp(-0.5 * eta**2 - 0.5 * np.log(2 * np.pi) - special.log_ndtr(-eta))
    score_i = y * lp - (1.0 - y) * lm
    g = W.T @ score_i
    if order == 1:
        return ll, g, None
    # d/d eta of score_i; lambda'(t) = -lambda(t)(t + lambda(t))
    h_i = -y * lp * (eta + lp) - (1.0 - y) * lm * (lm - eta)
    return ll, g, (W.T * h_i) @ W, score_i


def fit_fractional_probit(
    ds: Dataset,
    fixed_effects: Sequence[str] = (),
    cov_type: str = "robust",
    tol: float = 1e-8,
) -> BeliefUpdateFit:
    """Bernoulli quasi-MLE with probit link.

    ``cov_type="robust"`` gives the sandwich covariance (with the usual
    n/(n-1) factor); ``"oim"`` the inverse observed information.
    """
    if cov_type not in ("robust", "oim"):
        raise ValueError("cov_type must be 'robust' or 'oim'")
    W, names, fe = belief_design(ds, fixed_effects)
    _precheck(ds, W, names)
    y = transformed_response(ds)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("transformed response outside [0,1]")

    def obj(th):
        out = _fp_derivs(W, y, th)
        return out[0], out[1], out[2]

    init, *_ = np.linalg.lstsq(W, special.ndtri(np.clip(y, 1e-4, 1 - 1e-4)), rcond=None)
    res = maximize_loglik(obj, init, tol, derivatives=True, value=lambda th: _fp_derivs(W, y, th, 0)[0])
    res.raise_if_failed("fractional probit")
    theta = res.argmax
    cov = res.covariance
    if cov_type == "robust":
        _, _, H, score_i = _fp_derivs(W, y, theta)
        S = W * score_i[:, None]
        n = ds.n
        meat = S.T @ S * n / (n - 1)
        cov = cov @ meat @ cov
        cov = 0.5 * (cov + cov.T)
    return BeliefUpdateFit(
        link="fractional_probit",
        theta_hat=theta[:4].copy(),
        covariance=cov[:4, :4].copy(),
        params=theta,
        param_names=names,
        full_covariance=cov,
        n=ds.n,
        loglik_or_rss=res.loglik,
        cov_type=cov_type,
        converged=res.converged,
        fe_rows=fe,
        extra={"iterations": res.iterations, "gradient_norm": res.gradient_norm},
    )


def beta_loglik_derivs(W, y, params, order=2):
    """Beta regression, mean ``Phi(W theta)``, precision ``exp(zeta)``.

    ``params = [theta, zeta]``.
    """
    theta, zeta = params[:-1], params[-1]
    eta = W @ theta
    mu = np.clip(special.ndtr(eta), 1e-15, 1 - 1e-15)
    phi = np.exp(zeta)
    a, b = mu * phi, (1.0 - mu) * phi
    ly, l1y = np.log(y), np.log1p(-y)
    ll = float(np.sum(special.gammaln(phi) - special.gammaln(a) - special.gammaln(b)
                      + (a - 1.0) * ly + (b - 1.0) * l1y))
    if order == 0:
        return ll, None, None
    ystar = ly - l1y
    mustar = special.digamma(a) - special.digamma(b)
    l_mu = phi * (ystar - mustar)
    l_phi = special.digamma(phi) - mu * special.digamma(a) - (1 - mu) * special.digamma(b) + mu * ly + (1 - mu) * l1y
    dens = std_normal_pdf(eta)
    g = np.concatenate([W.T @ (l_mu * dens), [float(np.sum(l_phi)) * phi]])
    if order == 1:
        return ll, g, None
    t1a, t1b = special.polygamma(1, a), special.polygamma(1, b)
    l_mumu = -phi**2 * (t1a + t1b)
    l_muphi = (ystar - mustar) - phi * (mu * t1a - (1 - mu) * t1b)
    l_phiphi = special.polygamma(1, phi) - mu**2 * t1a - (1 - mu) ** 2 * t1b
    p = W.shape[1]
    H = np.empty((p + 1, p + 1))
    H[:p, :p] = (W.T * (l_mumu * dens**2 - l_mu * eta * dens)) @ W
    H[:p, p] = H[p, :p] = W.T @ (l_muphi * dens) * phi
    H[p, p] = float(np.sum(l_phiphi)) * phi**2 + float(np.sum(l_phi)) * phi
    return ll, g, H


def shrink_boundaries(y: np.ndarray) -> np.ndarray:
    """Map [0,1] into (0,1) by ``(y (n-1) + 1/2) / n``."""
    n = y.size
    return (y * (n - 1) + 0.5) / n


def fit_beta_regression(
    ds: Dataset,
    fixed_effects: Sequence[str] = (),
    boundary: str = "shrink",
    tol: float = 1e-8,
) -> BeliefUpdateFit:
    """Beta regression of ``(delta_b + 1) / 2``.

    ``scale_hat`` is the intercept of the log-precision equation, i.e. the
    log of ``phi`` in ``Var(y) = mu (1 - mu) / (1 + phi)``.  With
    ``boundary="shrink"`` responses at exactly 0 or 1 trigger the usual
    shrinkage of all responses; ``boundary="error"`` refuses them.
    """
    W, names, fe = belief_design(ds, fixed_effects)
    _precheck(ds, W, names)
    y = transformed_response(ds)
    at_edge = (y <= 0.0) | (y >= 1.0)
    if at_edge.any():
        if boundary == "error":
            raise ValueError(f"{int(at_edge.sum())} responses at exactly 0 or 1; "
                             "use boundary='shrink' or remove them")
        if boundary != "shrink":
            raise ValueError("boundary must be 'shrink' or 'error'")
        y = shrink_boundaries(y)
    names = names + ["log_precision"]

    if np.ptp(y) == 0.0:
        warnings.warn("response has zero variance; precision is unbounded and the "
                      "mean predictor is fitted exactly", DegenerateScaleWarning, stacklevel=2)
        theta, *_ = np.linalg.lstsq(W, special.ndtri(y), rcond=None)
        p = W.shape[1]
        return BeliefUpdateFit(
            link="beta_probit",
            theta_hat=theta[:4].copy(),
            covariance=np.full((4, 4), np.nan),
            params=np.append(theta, np.inf),
            param_names=names,
            full_covariance=np.full((p + 1, p + 1), np.nan),
            n=ds.n,
            loglik_or_rss=np.inf,
            scale_hat=np.inf,
            scale_se=np.nan,
            cov_type="oim",
            converged=False,
            fe_rows=fe,
            extra={"degenerate_scale": True},
        )

    theta0, *_ = np.linalg.lstsq(W, special.ndtri(y), rcond=None)
    mu0 = special.ndtr(W @ theta0)
    v = float(np.mean((y - mu0) ** 2))
    phi0 = max(float(np.mean(mu0 * (1 - mu0))) / max(v, 1e-12) - 1.0, 0.5)
    init = np.append(theta0, np.log(phi0))
    res = maximize_loglik(lambda p: beta_loglik_derivs(W, y, p), init, tol, derivatives=True,
                          value=lambda p: beta_loglik_derivs(W, y, p, 0)[0])
    res.raise_if_failed("beta regression")
    est = res.argmax
    cov = res.covariance
    return BeliefUpdateFit(
        link="beta_probit",
        theta_hat=est[:4].copy(),
        covariance=cov[:4, :4].copy(),
        params=est,
        param_names=names,
        full_covariance=cov,
        n=ds.n,
        loglik_or_rss=res.loglik,
        scale_hat=float(est[-1]),
        scale_se=float(np.sqrt(cov[-1, -1])),
        cov_type="oim",
        converged=res.converged,
        fe_rows=fe,
        extra={"precision": float(np.exp(est[-1])), "iterations": res.iterations},
    )


# ---------------------------------------------------------------------------


def _link(link: str):
    if link == "linear":
        return (lambda v: v), (lambda v: np.ones_like(v))
    return special.ndtr, std_normal_pdf


def ate_by_group(fit: BeliefUpdateFit, retransform: bool = True) -> GroupATE:
    """Treatment effect on the belief change within each condition group.

    ``below = L(t0+t1) - L(t0)``, ``above = L(t0+t1+t2+t3) - L(t0+t2)``,
    averaged over fixed-effect rows when the fit has them.  Non-linear
    links are mapped back to the belief-change scale (factor 2) unless
    ``retransform`` is false.  Standard errors by the delta method.
    """
    if not fit.converged and fit.link != "linear":
        raise ValueError("fit did not converge")
    L, dL = _link(fit.link)
    k = len(fit.params) - (1 if fit.link == "beta_probit" else 0)
    theta = fit.params[:k]
    cov = fit.full_covariance[:k, :k]
    offset = fit.fe_rows @ theta[4:] if fit.fe_rows is not None and fit.fe_rows.shape[1] else np.zeros(1)
    factor = 2.0 if (fit.link != "linear" and retransform) else 1.0

    def contrast(treated: np.ndarray, control: np.ndarray) -> Estimate:
        v1 = theta[:4] @ treated + offset
        v0 = theta[:4] @ control + offset
        est = factor * float(np.mean(L(v1) - L(v0)))
        grad = np.zeros(k)
        d1, d0 = dL(v1), dL(v0)
        grad[:4] = factor * (np.mean(d1) * treated - np.mean(d0) * control)
        if k > 4:
            rows = fit.fe_rows
            grad[4:] = factor * (rows.T @ (d1 - d0)) / rows.shape[0]
        se = float(np.sqrt(max(grad @ cov @ grad, 0.0)))
        return Estimate.from_se(est, se, "delta")

    below = contrast(np.array([1.0, 1, 0, 0]), np.array([1.0, 0, 0, 0]))
    above = contrast(np.array([1.0, 1, 1, 1]), np.array([1.0, 0, 1, 0]))
    scale = "delta_b" if (fit.link == "linear" or retransform) else "transformed"
    return GroupATE(below, above, scale)


def residuals(fit: BeliefUpdateFit, ds: Dataset) -> tuple:
    """First-stage residuals and their standard deviation (divisor n).

    Only defined for the linear link, which is what the control function
    uses.
    """
    if fit.link != "linear":
        raise ValueError(f"control-function residuals need the linear link, not {fit.link!r}")
    W, _, _ = belief_design(ds, () if fit.fe_rows is None else _fe_keys(fit))
    e = ds.delta_b - W @ fit.params
    return e, float(np.sqrt(np.mean(e * e)))


def _fe_keys(fit: BeliefUpdateFit) -> tuple:
    keys = []
    for name in fit.param_names[4:]:
        k = name.split("=", 1)[0]
        if k not in keys:
            keys.append(k)
    return tuple(keys)
