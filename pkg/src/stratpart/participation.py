"""Probit participation models with an endogenous belief change.

Four estimators of ``Pr(a=1 | delta_b, x) = Phi(alpha + beta delta_b + x gamma)``:

``probit``
    treats the belief change as exogenous;
``cf_twostep``
    adds first-stage OLS residuals as a control function, then rescales the
    coefficients to the structural (unit error variance) scale;
``cf_joint_mle``
    full-information ML of the belief equation and the probit with
    correlated normal errors;
``newey_minchi2``
    Amemiya-GLS / minimum chi-square combination of the reduced-form probit
    and the first stage.  Its coefficients are normalized by the reduced-form
    error scale and are not directly comparable with the ML ones.

Predictive margins and average partial effects use the average structural
function: the fitted index is averaged over the sample with the belief
change either observed or fixed at a chosen value.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize

from . import kernels
from .belief import fit_ols_belief
from .domain import CLUSTER_KEYS, Dataset, FixedEffectDesign, fixed_effect_design
from .numerics import (
    ConvergenceError,
    Estimate,
    finite_diff_jacobian,
    maximize_loglik,
    std_normal_cdf,
    std_normal_pdf,
)

logger = logging.getLogger(__name__)

ESTIMATORS = ("probit", "cf_twostep", "cf_joint_mle", "newey_minchi2")


class PerfectSeparationError(ValueError):
    pass


class DegenerateControlError(ValueError):
    pass


class DegenerateSEWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Regressors besides the constant and the belief change.

    ``fixed_effects`` lists categorical keys coded as dummies against their
    largest cell; date cells that predict the outcome perfectly are merged
    into a neighbouring day when ``merge_separated`` is set.
    ``first_stage_fixed_effects`` adds the same dummies to the belief
    equation of the control-function estimators.
    """

    fixed_effects: tuple = CLUSTER_KEYS
    include_covariates: bool = True
    merge_separated: bool = True
    first_stage_fixed_effects: bool = False


@dataclass(frozen=True)
class ParticipationDesign:
    fe: FixedEffectDesign
    covariate_names: tuple
    include_covariates: bool

    @property
    def names(self) -> list:
        cov = [f"x:{n}" for n in self.covariate_names] if self.include_covariates else []
        return ["const", "delta_b"] + self.fe.names + cov

    def matrix(self, ds: Dataset, delta_b=None) -> np.ndarray:
        db = ds.delta_b if delta_b is None else np.broadcast_to(np.asarray(delta_b, dtype=float), (ds.n,))
        cols = [np.ones((ds.n, 1)), np.asarray(db, dtype=float).reshape(-1, 1), self.fe.matrix(ds)]
        if self.include_covariates and ds.covariates.shape[1]:
            cols.append(ds.covariates)
        return np.hstack(cols)


def participation_design(ds: Dataset, spec: ModelSpec = ModelSpec()) -> ParticipationDesign:
    fe = fixed_effect_design(ds, spec.fixed_effects, outcome=ds.a, merge_separated=spec.merge_separated)
    names = ds.covariate_names if spec.include_covariates else ()
    return ParticipationDesign(fe, tuple(names), spec.include_covariates)


@dataclass
class ParticipationFit:
    estimator: str
    params: np.ndarray
    param_names: list
    covariance: np.ndarray
    index_slice: slice
    design: ParticipationDesign
    n: int
    loglik: Optional[float] = None
    eta_hat: Optional[float] = None
    rho_hat: Optional[float] = None
    sigma_e_hat: Optional[float] = None
    converged: bool = True
    se_label: str = "standard"
    extra: dict = field(default_factory=dict)

    @property
    def coef(self) -> np.ndarray:
        return self.params[self.index_slice]

    @property
    def coef_names(self) -> list:
        return self.param_names[self.index_slice]

    @property
    def coef_cov(self) -> np.ndarray:
        return self.covariance[self.index_slice, self.index_slice]

    @property
    def alpha_hat(self) -> float:
        return float(self.coef[0])

    @property
    def beta_hat(self) -> float:
        return float(self.coef[1])

    @property
    def gamma_hat(self) -> np.ndarray:
        return self.coef[2:].copy()

    @property
    def gamma_names(self) -> list:
        return self.coef_names[2:]

    def se(self, name: str) -> float:
        j = self.param_names.index(name)
        return float(np.sqrt(self.covariance[j, j]))

    def estimate(self, name: str) -> Estimate:
        j = self.param_names.index(name)
        return Estimate.from_se(self.params[j], np.sqrt(self.covariance[j, j]), self.se_label)

    def named_coef(self) -> dict:
        return dict(zip(self.coef_names, self.coef.tolist()))


# ---------------------------------------------------------------------------
# separation


def check_separation(X: np.ndarray, y: np.ndarray, names: Optional[Sequence[str]] = None, tol: float = 1e-7):
    """Raise if (quasi-)complete separation makes the probit MLE non-existent.

    Solves ``max 1'A b`` subject to ``A b >= 0``, ``|b| <= 1`` with
    ``A = diag(2y - 1) X``; a positive optimum is a separating direction.
    """
    y = np.asarray(y)
    if y.min() == y.max():
        raise PerfectSeparationError("outcome has only one class")
    A = (2.0 * y - 1.0)[:, None] * X
    scale = np.maximum(np.abs(X).max(axis=0), 1e-12)
    As = A / scale
    res = optimize.linprog(
        -As.sum(axis=0), A_ub=-As, b_ub=np.zeros(X.shape[0]),
        bounds=[(-1.0, 1.0)] * X.shape[1], method="highs",
    )
    if res.status == 0 and -res.fun > tol * X.shape[0]:
        d = res.x
        involved = [names[j] if names else f"col{j}" for j in np.flatnonzero(np.abs(d) > 1e-6)]
        n_sep = int(np.sum(As @ d > 1e-9))
        raise PerfectSeparationError(
            f"outcome is perfectly predicted for {n_sep} observation(s) along a direction in "
            f"{', '.join(involved)}; the MLE does not exist"
        )


# ---------------------------------------------------------------------------
# estimators


def _probit(X, y, names, tol=1e-8, init=None, weights=None):
    w = np.ones(X.shape[0]) if weights is None else weights
    yf = np.asarray(y, dtype=float)
    check_separation(X, y, names)
    x0 = np.zeros(X.shape[1]) if init is None else init
    res = maximize_loglik(
        lambda b: kernels.probit_derivs(X, yf, w, b, 2), x0, tol, derivatives=True,
        value=lambda b: kernels.probit_derivs(X, yf, w, b, 0)[0],
    )
    if not res.converged:
        raise ConvergenceError(f"probit did not converge: {res.message}")
    return res


def fit_probit(ds: Dataset, spec: ModelSpec = ModelSpec(), tol: float = 1e-8) -> ParticipationFit:
    """Probit of participation on the belief change, treated as exogenous."""
    design = participation_design(ds, spec)
    X = design.matrix(ds)
    names = design.names
    res = _probit(X, ds.a, names, tol)
    p = X.shape[1]
    return ParticipationFit(
        estimator="probit",
        params=res.argmax,
        param_names=names,
        covariance=res.covariance,
        index_slice=slice(0, p),
        design=design,
        n=ds.n,
        loglik=res.loglik,
        converged=res.converged,
        extra={"iterations": res.iterations, "gradient_norm": res.gradient_norm},
    )


def _first_stage(ds: Dataset, spec: ModelSpec, design: ParticipationDesign):
    keys = spec.fixed_effects if spec.first_stage_fixed_effects else ()
    fs = fit_ols_belief(ds, fixed_effects=keys)
    return fs


def _belief_matrix(ds: Dataset, fs) -> np.ndarray:
    z = ds.z.astype(float)
    c = ds.c.astype(float)
    W = np.column_stack([np.ones(ds.n), z, c, z * c])
    if fs.fe_rows is not None and fs.fe_rows.shape[1]:
        W = np.column_stack([W, fs.fe_rows])
    return W


def fit_cf_twostep(
    ds: Dataset,
    spec: ModelSpec = ModelSpec(),
    tol: float = 1e-8,
    bootstrap=None,
) -> ParticipationFit:
    """Control-function two-step estimator.

    Stage 1 is the linear belief regression; stage 2 a probit of
    participation on the belief change, the stage-1 residual and the other
    regressors.  Stage-2 coefficients live on the scale of the error left
    after conditioning on the residual; dividing by
    ``sqrt(1 + eta^2 sigma^2)`` returns them to the structural scale, which
    is what ``params`` holds.  The covariance treats stage 1 as known
    (labelled ``standard-uncorrected``); pass a
    :class:`~stratpart.inference.BootstrapSpec` as ``bootstrap`` to attach
    bootstrap standard errors that account for the generated regressor.
    """
    design = participation_design(ds, spec)
    fs = _first_stage(ds, spec, design)
    e_hat = fs.residuals
    sigma = float(np.sqrt(np.mean(e_hat**2)))
    if sigma <= 1e-12 * (1.0 + float(np.max(np.abs(ds.delta_b)))):
        raise DegenerateControlError("first-stage residuals are identically zero; "
                                     "the control-function coefficient is not identified")
    X = design.matrix(ds)
    names = design.names
    Xa = np.column_stack([X, e_hat])
    res = _probit(Xa, ds.a, names + ["e_hat"], tol)
    raw = res.argmax
    raw_cov = res.covariance
    p = X.shape[1]
    delta_r, eta = raw[:p], float(raw[p])
    scale = float(np.sqrt(1.0 + (eta * sigma) ** 2))
    coef = delta_r / scale
    J = np.zeros((p, p + 1))
    J[:, :p] = np.eye(p) / scale
    J[:, p] = -delta_r * eta * sigma**2 / scale**3
    cov = J @ raw_cov @ J.T
    fit = ParticipationFit(
        estimator="cf_twostep",
        params=coef,
        param_names=names,
        covariance=cov,
        index_slice=slice(0, p),
        design=design,
        n=ds.n,
        loglik=res.loglik,
        eta_hat=eta,
        sigma_e_hat=sigma,
        converged=True,
        se_label="standard-uncorrected",
        extra={
            "stage2_params": raw,
            "stage2_names": names + ["e_hat"],
            "stage2_covariance": raw_cov,
            "eta_se_uncorrected": float(np.sqrt(raw_cov[p, p])),
            "rho_implied": eta * sigma / scale,
            "first_stage_theta": fs.params.copy(),
        },
    )
    if bootstrap is not None:
        from .inference import bootstrap as run_bootstrap

        def pipeline(d):
            f = fit_cf_twostep(d, spec, tol)
            got = f.named_coef()
            return np.array([got.get(n, np.nan) for n in names])

        boot = run_bootstrap(ds, pipeline, bootstrap)
        fit.extra["bootstrap"] = boot
        fit.extra["bootstrap_se"] = dict(zip(names, boot.se.tolist()))
    return fit


def cf_joint_loglik(params, X, W, y, db, weights=None, order=2):
    """Log-likelihood of the joint belief/participation system.

    ``params = [delta (X columns), theta (W columns), log sigma_e, atanh rho]``.
    """
    w = np.ones(X.shape[0]) if weights is None else weights
    return kernels.cf_joint_derivs(X, W, np.asarray(y, dtype=float), db, w, np.asarray(params, dtype=float), order)


def fit_cf_joint_arrays(X, W, y, db, init=None, tol: float = 1e-8, names=None):
    """Joint ML on raw arrays; returns the optimizer result."""
    yf = np.asarray(y, dtype=float)
    w = np.ones(X.shape[0])
    if init is None:
        theta, *_ = np.linalg.lstsq(W, db, rcond=None)
        e = db - W @ theta
        sigma = max(float(np.sqrt(np.mean(e * e))), 1e-6)
        init = np.concatenate([np.zeros(X.shape[1]), theta, [np.log(sigma), 0.0]])
    res = maximize_loglik(
        lambda p: kernels.cf_joint_derivs(X, W, yf, db, w, p, 2), init, tol, derivatives=True,
        value=lambda p: kernels.cf_joint_derivs(X, W, yf, db, w, p, 0)[0],
        max_iter=300,
    )
    return res


def fit_cf_joint_mle(ds: Dataset, spec: ModelSpec = ModelSpec(), tol: float = 1e-8) -> ParticipationFit:
    """Full-information ML with correlated errors.

    Internally the error scale and correlation are optimized as
    ``log sigma_e`` and ``atanh rho``; ``rho_hat`` and ``sigma_e_hat`` are
    reported on the natural scale with delta-method standard errors in
    ``extra``.
    """
    design = participation_design(ds, spec)
    X = design.matrix(ds)
    names = design.names
    check_separation(X, ds.a, names)
    two = fit_cf_twostep(ds, spec, tol)
    fs_theta = two.extra["first_stage_theta"]
    fs = _first_stage(ds, spec, design)
    W = _belief_matrix(ds, fs)
    wnames = [f"theta:{n}" for n in fs.param_names]
    rho0 = float(np.clip(two.extra["rho_implied"], -0.9, 0.9))
    init = np.concatenate([two.params, fs_theta, [np.log(two.sigma_e_hat), np.arctanh(rho0)]])
    res = fit_cf_joint_arrays(X, W, ds.a, ds.delta_b, init, tol)
    p = X.shape[1]
    kappa = float(res.argmax[-1])
    if not res.converged:
        if abs(kappa) > 5.0:
            raise ConvergenceError(f"joint MLE ran to the |rho| -> 1 boundary (atanh rho = {kappa:.2f}); "
                                   f"{res.message}")
        raise ConvergenceError(f"joint MLE did not converge: {res.message}")
    rho = float(np.tanh(kappa))
    sigma = float(np.exp(res.argmax[-2]))
    cov = res.covariance
    all_names = names + wnames + ["log_sigma_e", "atanh_rho"]
    implied = cf_joint_loglik(init, X, W, ds.a, ds.delta_b, order=0)[0]
    return ParticipationFit(
        estimator="cf_joint_mle",
        params=res.argmax,
        param_names=all_names,
        covariance=cov,
        index_slice=slice(0, p),
        design=design,
        n=ds.n,
        loglik=res.loglik,
        rho_hat=rho,
        sigma_e_hat=sigma,
        converged=True,
        extra={
            "rho_se": float((1 - rho**2) * np.sqrt(cov[-1, -1])),
            "sigma_e_se": float(sigma * np.sqrt(cov[-2, -2])),
            "iterations": res.iterations,
            "gradient_norm": res.gradient_norm,
            "twostep_implied_loglik": float(implied),
            "belief_matrix_names": fs.param_names,
        },
    )


def fit_newey_minchi2(ds: Dataset, spec: ModelSpec = ModelSpec(), tol: float = 1e-8) -> ParticipationFit:
    """Newey's efficient two-step minimum chi-square estimator.

    1. OLS of the belief change on all exogenous variables (included
       regressors plus the instruments z, c, z*c); residuals ``v``.
    2. Reduced-form probit of participation on all exogenous variables and
       ``v``: coefficients ``a`` with inverse-information block ``J``.
    3. Control-function probit with the belief change, included regressors
       and ``v`` gives a consistent ``beta`` and the coefficient ``lam`` on ``v``.
    4. ``Omega = J + (lam - beta)^2 s_v^2 (X'X)^-1``; the estimate minimizes
       ``(a - D d)' Omega^-1 (a - D d)`` with ``D = [Pi, I_1]``.
    """
    design = participation_design(ds, spec)
    Xfull = design.matrix(ds)
    names = design.names
    X1 = np.delete(Xfull, 1, axis=1)  # included exogenous (const, FE, covariates)
    n1 = [nm for i, nm in enumerate(names) if i != 1]
    z = ds.z.astype(float)
    c = ds.c.astype(float)
    Xall = np.column_stack([X1, z, c, z * c])
    all_names = n1 + ["z", "c", "z*c"]
    K = Xall.shape[1]
    if np.linalg.matrix_rank(Xall) < K:
        raise ValueError("exogenous variables and instruments are collinear")
    y2 = ds.delta_b
    XtX_inv = np.linalg.inv(Xall.T @ Xall)
    Pi = XtX_inv @ Xall.T @ y2
    v = y2 - Xall @ Pi
    s2v = float(v @ v) / (ds.n - K)

    rf = _probit(np.column_stack([Xall, v]), ds.a, all_names + ["v"], tol)
    a_hat = rf.argmax[:K]
    J = rf.covariance[:K, :K]

    siv = _probit(np.column_stack([X1[:, :1], y2, X1[:, 1:], v]), ds.a,
                  [n1[0], "delta_b"] + n1[1:] + ["v"], tol)
    beta_c = float(siv.argmax[1])
    lam = float(siv.argmax[-1])

    Omega = J + (lam - beta_c) ** 2 * s2v * XtX_inv
    k1 = X1.shape[1]
    D = np.zeros((K, 1 + k1))
    D[:, 0] = Pi
    D[:k1, 1:] = np.eye(k1)
    Om_inv = np.linalg.inv(Omega)
    M = D.T @ Om_inv @ D
    cond = np.linalg.cond(M)
    rank = int(np.linalg.matrix_rank(M))
    if rank < M.shape[0] or cond > 1e12:
        warnings.warn(f"minimum-distance weight nearly singular (rank {rank}/{M.shape[0]}, "
                      f"cond {cond:.2e}); using pseudo-inverse", RuntimeWarning, stacklevel=2)
        cov_d = np.linalg.pinv(M)
    else:
        cov_d = np.linalg.inv(M)
    d = cov_d @ D.T @ Om_inv @ a_hat
    # reorder (beta, const, rest) -> (const, beta, rest)
    order = [1, 0] + list(range(2, 1 + k1))
    coef = d[order]
    cov = cov_d[np.ix_(order, order)]
    resid = a_hat - D @ d
    exog_wald = (lam / float(np.sqrt(siv.covariance[-1, -1]))) ** 2
    return ParticipationFit(
        estimator="newey_minchi2",
        params=coef,
        param_names=names,
        covariance=0.5 * (cov + cov.T),
        index_slice=slice(0, len(coef)),
        design=design,
        n=ds.n,
        converged=True,
        extra={
            "overid_chi2": float(resid @ Om_inv @ resid),
            "overid_df": K - (1 + k1),
            "weight_rank": rank,
            "weight_cond": float(cond),
            "exogeneity_wald_chi2": float(exog_wald),
            "variance_normalized": True,
        },
    )


FITTERS = {
    "probit": fit_probit,
    "cf_twostep": fit_cf_twostep,
    "cf_joint_mle": fit_cf_joint_mle,
    "newey_minchi2": fit_newey_minchi2,
}


def fit(ds: Dataset, estimator: str, spec: ModelSpec = ModelSpec(), **kw) -> ParticipationFit:
    try:
        fn = FITTERS[estimator]
    except KeyError:
        raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}") from None
    return fn(ds, spec, **kw)


# ---------------------------------------------------------------------------
# delta method, margins, APEs


def delta_method(
    fit: ParticipationFit,
    functional: Callable[[np.ndarray], float],
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    method: str = "delta",
) -> Estimate:
    """First-order standard error of ``functional(params)``.

    Without ``grad`` the gradient is taken by central differences.
    """
    theta = fit.params
    est = float(functional(theta))
    g = grad(theta) if grad is not None else finite_diff_jacobian(functional, theta)[0]
    g = np.asarray(g, dtype=float).ravel()
    if not np.any(g):
        warnings.warn("functional has zero gradient at the estimate; delta-method SE is degenerate",
                      DegenerateSEWarning, stacklevel=2)
    var = float(g @ fit.covariance @ g)
    return Estimate.from_se(est, np.sqrt(max(var, 0.0)), method)


def _embed(fit: ParticipationFit, g_coef: np.ndarray) -> np.ndarray:
    g = np.zeros(fit.params.size)
    g[fit.index_slice] = g_coef
    return g


def _mean_prob(fit, X):
    def f(params):
        return float(np.mean(std_normal_cdf(X @ params[fit.index_slice])))

    def g(params):
        nu = X @ params[fit.index_slice]
        return _embed(fit, X.T @ std_normal_pdf(nu) / X.shape[0])

    return f, g


def _mean_ape(fit, X):
    def f(params):
        d = params[fit.index_slice]
        return float(np.mean(std_normal_pdf(X @ d)) * d[1])

    def g(params):
        d = params[fit.index_slice]
        nu = X @ d
        ph = std_normal_pdf(nu)
        out = X.T @ (-nu * ph) * d[1] / X.shape[0]
        out[1] += float(np.mean(ph))
        return _embed(fit, out)

    return f, g


@dataclass
class MarginTable:
    overall: Estimate
    at_means: Estimate
    at_grid: list  # of (delta_b, Estimate)

    def as_dict(self) -> dict:
        return {
            "overall": self.overall.as_dict(),
            "at_means": self.at_means.as_dict(),
            "at_grid": [{"delta_b": g, **e.as_dict()} for g, e in self.at_grid],
        }


@dataclass
class APETable:
    overall: Estimate
    at_means: Estimate
    at_pre: Estimate
    at_post: Estimate

    def as_dict(self) -> dict:
        return {k: getattr(self, k).as_dict() for k in ("overall", "at_means", "at_pre", "at_post")}


DEFAULT_GRID = (-0.4, -0.2, 0.0, 0.2, 0.4)


def margin_functionals(fit: ParticipationFit, ds: Dataset, grid: Sequence[float] = DEFAULT_GRID) -> dict:
    """name -> (value function, gradient function) for every margin."""
    X = fit.design.matrix(ds)
    out = {"overall": _mean_prob(fit, X), "at_means": _mean_prob(fit, X.mean(axis=0, keepdims=True))}
    for gv in grid:
        out[f"at_{gv:g}"] = _mean_prob(fit, fit.design.matrix(ds, delta_b=gv))
    return out


def ape_functionals(fit: ParticipationFit, ds: Dataset) -> dict:
    X = fit.design.matrix(ds)
    mean_db = float(np.mean(ds.delta_b))
    return {
        "overall": _mean_ape(fit, X),
        "at_means": _mean_ape(fit, X.mean(axis=0, keepdims=True)),
        "at_pre": _mean_ape(fit, fit.design.matrix(ds, delta_b=0.0)),
        "at_post": _mean_ape(fit, fit.design.matrix(ds, delta_b=mean_db)),
    }


def predictive_margins(fit: ParticipationFit, ds: Dataset, grid: Sequence[float] = DEFAULT_GRID) -> MarginTable:
    fns = margin_functionals(fit, ds, grid)
    est = {k: delta_method(fit, f, g) for k, (f, g) in fns.items()}
    return MarginTable(est["overall"], est["at_means"], [(float(gv), est[f"at_{gv:g}"]) for gv in grid])


def ape(fit: ParticipationFit, ds: Dataset, at: str = "overall") -> Estimate:
    """Average partial effect of the belief change on participation."""
    fns = ape_functionals(fit, ds)
    if at not in fns:
        raise ValueError(f"'at' must be one of {sorted(fns)}")
    f, g = fns[at]
    return delta_method(fit, f, g)


def ape_table(fit: ParticipationFit, ds: Dataset) -> APETable:
    return APETable(*(ape(fit, ds, k) for k in ("overall", "at_means", "at_pre", "at_post")))


def joint_wald_coefficients(fit: ParticipationFit, exclude=("const",)) -> tuple:
    """Restriction matrix selecting every index coefficient except ``exclude``."""
    idx = [i for i, nm in enumerate(fit.param_names[fit.index_slice]) if nm not in exclude]
    start = fit.index_slice.start or 0
    R = np.zeros((len(idx), fit.params.size))
    for r, i in enumerate(idx):
        R[r, start + i] = 1.0
    return R, np.zeros(len(idx))
