"""Normal link functions, a Newton maximizer with observed-information
covariance, finite-difference helpers and reproducible random streams."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg, special

logger = logging.getLogger(__name__)

SQRT_2PI = np.sqrt(2.0 * np.pi)
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def std_normal_cdf(x):
    """Standard normal CDF, accurate to ~1e-16 absolute."""
    return special.ndtr(x)


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x) / SQRT_2PI
    return out if out.ndim else float(out)


def std_normal_logcdf(x):
    return special.log_ndtr(x)


def inverse_mills(t):
    """phi(t) / Phi(t), stable far into the lower tail."""
    t = np.asarray(t, dtype=float)
    return np.exp(-0.5 * t * t - LOG_SQRT_2PI - special.log_ndtr(t))


# ---------------------------------------------------------------------------
# optimizer


class ConvergenceError(RuntimeError):
    pass


@dataclass
class OptResult:
    argmax: np.ndarray
    loglik: float
    covariance: np.ndarray
    converged: bool
    iterations: int
    gradient_norm: float
    hessian: Optional[np.ndarray] = None
    covariance_available: bool = True
    diverging: bool = False
    message: str = ""
    quasi_newton_steps: int = 0

    def raise_if_failed(self, what: str = "maximization"):
        if not self.converged:
            raise ConvergenceError(f"{what} did not converge: {self.message}")
        return self


def _neg_definite_solve(H, g):
    """Newton direction -H^{-1} g, or None when -H is not positive definite."""
    try:
        c = linalg.cho_factor(-H, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        return None
    return linalg.cho_solve(c, g)


def covariance_from_hessian(H):
    """Inverse negative Hessian; ``None`` if it is not positive definite."""
    H = np.asarray(H, dtype=float)
    try:
        c = linalg.cho_factor(-H, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        return None
    cov = linalg.cho_solve(c, np.eye(H.shape[0]))
    return 0.5 * (cov + cov.T)


def maximize_loglik(
    objective: Callable,
    init,
    tol: float = 1e-8,
    *,
    grad: Optional[Callable] = None,
    hess: Optional[Callable] = None,
    derivatives: bool = False,
    value: Optional[Callable] = None,
    max_iter: int = 200,
    step_tol: float = 1e-6,
    max_halvings: int = 60,
) -> OptResult:
    """Maximize a smooth log-likelihood by damped Newton steps.

    ``objective(x)`` returns the log-likelihood, or the triple
    ``(value, gradient, hessian)`` when ``derivatives=True``; ``value`` is
    then an optional cheaper value-only callable for the line search.  Missing
    derivatives are replaced by central finite differences.  Where the
    Hessian is not negative definite the step falls back to a BFGS
    approximation of the negative Hessian.

    Convergence requires ``max|gradient| <= tol`` *and* a Newton step no
    larger than ``step_tol``; the second condition is what catches
    separated binary data, where the gradient vanishes while the
    parameters run off to infinity.
    """
    x = np.array(init, dtype=float)
    p = x.size

    if derivatives:
        evaluate = objective
    else:
        g_fn = grad if grad is not None else (lambda v: finite_diff_grad(objective, v))
        h_fn = hess if hess is not None else (lambda v: finite_diff_hessian(g_fn, v))

        def evaluate(v):
            return objective(v), g_fn(v), h_fn(v)

    if value is not None:
        value_only = value
    elif derivatives:
        def value_only(v):
            return evaluate(v)[0]
    else:
        value_only = objective

    f, g, H = evaluate(x)
    f = float(f)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the initial point")

    B = np.eye(p) * max(1.0, float(np.max(np.abs(np.diag(H))))) if p else np.eye(0)
    norms = []
    quasi = 0
    converged = False
    message = "maximum iterations reached"
    it = 0
    for it in range(1, max_iter + 1):
        d = _neg_definite_solve(H, g)
        if d is None:
            quasi += 1
            d = linalg.solve(B, g, assume_a="pos")
        gnorm = float(np.max(np.abs(g))) if p else 0.0
        if gnorm <= tol and float(np.max(np.abs(d), initial=0.0)) <= step_tol:
            converged = True
            message = "gradient tolerance reached"
            it -= 1
            break

        slope = float(g @ d)
        if slope <= 0:
            d = g / max(1.0, gnorm)
            slope = float(g @ d)
        t = 1.0
        accepted = False
        # near the optimum the ascent is below the rounding error of f
        noise = 64.0 * np.finfo(float).eps * (1.0 + abs(f))
        for _ in range(max_halvings):
            x_new = x + t * d
            f_new = value_only(x_new)
            if np.isfinite(f_new) and f_new >= f + 1e-4 * t * slope - noise:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if gnorm <= tol:
                converged = True
                message = "gradient tolerance reached (no further ascent possible)"
            else:
                message = "line search failed"
            break

        f_new, g_new, H_new = evaluate(x_new)
        s = x_new - x
        yv = g - g_new
        sy = float(s @ yv)
        if sy > 1e-12 * float(s @ s):
            Bs = B @ s
            B = B - np.outer(Bs, Bs) / float(s @ Bs) + np.outer(yv, yv) / sy
        x, f, g, H = x_new, float(f_new), g_new, H_new
        norms.append(float(np.max(np.abs(x))))

    diverging = False
    if not converged and len(norms) >= 20:
        tail = np.asarray(norms[-20:])
        diverging = bool(np.all(np.diff(tail) > 0))
        if diverging:
            message = "parameters diverging (estimate does not exist, e.g. separated data)"

    cov = covariance_from_hessian(H)
    available = cov is not None
    if not available:
        cov = np.full((p, p), np.nan)
        if converged:
            message += "; Hessian singular, covariance unavailable"
    return OptResult(
        argmax=x,
        loglik=f,
        covariance=cov,
        converged=converged,
        iterations=it,
        gradient_norm=float(np.max(np.abs(g))) if p else 0.0,
        hessian=H,
        covariance_available=available,
        diverging=diverging,
        message=message,
        quasi_newton_steps=quasi,
    )


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(objective: Callable, point, step: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient.  The default step scales with |x|."""
    x = np.asarray(point, dtype=float)
    out = np.empty(x.size)
    for j in range(x.size):
        h = step if step is not None else 1e-5 * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (objective(x + e) - objective(x - e)) / (2.0 * h)
    return out


def finite_diff_hessian(grad: Callable, point, step: Optional[float] = None) -> np.ndarray:
    """Symmetrized central differences of an analytic gradient."""
    x = np.asarray(point, dtype=float)
    p = x.size
    H = np.empty((p, p))
    for j in range(p):
        h = step if step is not None else 1e-5 * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        H[:, j] = (np.asarray(grad(x + e)) - np.asarray(grad(x - e))) / (2.0 * h)
    return 0.5 * (H + H.T)


def finite_diff_jacobian(fn: Callable, point, step: Optional[float] = None) -> np.ndarray:
    x = np.asarray(point, dtype=float)
    f0 = np.atleast_1d(np.asarray(fn(x), dtype=float))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = step if step is not None else 1e-6 * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (np.atleast_1d(fn(x + e)) - np.atleast_1d(fn(x - e))) / (2.0 * h)
    return J


# ---------------------------------------------------------------------------
# random streams


@dataclass(frozen=True)
class RandomStream:
    """Counter-based stream keyed by ``(seed, stream_id)``.

    Replication ``r`` of a bootstrap always reads stream ``(seed, r)``, so
    results do not depend on the order in which replications run.
    """

    seed: int
    stream_id: int = 0
    _mask: int = field(default=(1 << 64) - 1, repr=False, compare=False)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & self._mask, self.stream_id & self._mask], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream_id: int) -> "RandomStream":
        return RandomStream(self.seed, stream_id)


# ---------------------------------------------------------------------------
# point estimates with standard errors


def two_sided_p(zstat) -> float:
    """Two-sided normal tail, capped at 1."""
    return float(min(1.0, 2.0 * special.ndtr(-abs(zstat))))


@dataclass(frozen=True)
class Estimate:
    estimate: float
    se: float
    p: float
    method: str = "standard"

    @classmethod
    def from_se(cls, estimate: float, se: float, method: str = "standard") -> "Estimate":
        estimate, se = float(estimate), float(se)
        if se > 0 and np.isfinite(se):
            p = two_sided_p(estimate / se)
        elif se == 0 and estimate == 0:
            p = 1.0
        else:
            p = float("nan") if not np.isfinite(se) else 0.0
        return cls(estimate, se, p, method)

    def ci(self, level: float = 0.95) -> tuple:
        q = float(special.ndtri(0.5 + level / 2.0))
        return self.estimate - q * self.se, self.estimate + q * self.se

    def as_dict(self) -> dict:
        return {"estimate": self.estimate, "se": self.se, "p": self.p, "se_method": self.method}
