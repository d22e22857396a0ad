"""Pure-numpy likelihood kernels (fallback for the compiled ``_ckernels``).

Both backends expose the same two functions with identical signatures:

``probit_derivs(X, y, w, beta, order)``
    weighted probit log-likelihood of ``y`` on ``X``.

``cf_joint_derivs(X, W, y, db, w, params, order)``
    weighted log-likelihood of the triangular system
    ``db = W theta + e``, ``y = 1{X delta + u > 0}``, with ``(e, u)``
    bivariate normal, ``sd(e) = exp(tau)``, ``sd(u) = 1``,
    ``corr = tanh(kappa)``; ``params = [delta, theta, tau, kappa]``.

``order`` 0 returns the value only (gradient and Hessian are ``None``),
1 adds the gradient, 2 the Hessian.
"""

import numpy as np
from scipy.special import log_ndtr

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _mills(t):
    return np.exp(-0.5 * t * t - _LOG_SQRT_2PI - log_ndtr(t))


def probit_derivs(X, y, w, beta, order=2):
    X = np.asarray(X, dtype=float)
    q = 2.0 * np.asarray(y, dtype=float) - 1.0
    t = q * (X @ beta)
    ll = float(w @ log_ndtr(t))
    if order == 0:
        return ll, None, None
    lam = _mills(t)
    grad = X.T @ (w * q * lam)
    if order == 1:
        return ll, grad, None
    hess = -(X.T * (w * lam * (lam + t))) @ X
    return ll, grad, hess


def cf_joint_derivs(X, W, y, db, w, params, order=2):
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    px, pw = X.shape[1], W.shape[1]
    delta = params[:px]
    theta = params[px : px + pw]
    tau, kappa = params[px + pw], params[px + pw + 1]
    sigma = np.exp(tau)
    rho = np.tanh(kappa)
    s = 1.0 / np.cosh(kappa)

    r = (db - W @ theta) / sigma
    m = (X @ delta + rho * r) / s
    q = 2.0 * np.asarray(y, dtype=float) - 1.0
    t = q * m
    ll = float(w @ (-0.5 * r * r - tau - _LOG_SQRT_2PI + log_ndtr(t)))
    if order == 0:
        return ll, None, None

    lam = _mills(t)
    wql = w * q * lam
    m_tau = -(rho / s) * r
    m_kap = r * s + m * rho
    g_delta = X.T @ wql / s
    g_theta = W.T @ (w * r) / sigma - (rho / (s * sigma)) * (W.T @ wql)
    g_tau = float(w @ (r * r - 1.0) + wql @ m_tau)
    g_kap = float(wql @ m_kap)
    grad = np.concatenate([g_delta, g_theta, [g_tau, g_kap]])
    if order == 1:
        return ll, grad, None

    P = px + pw + 2
    it, ik = px + pw, px + pw + 1
    M = np.empty((X.shape[0], P))
    M[:, :px] = X / s
    M[:, px:it] = -(rho / (s * sigma)) * W
    M[:, it] = m_tau
    M[:, ik] = m_kap
    lamp = -lam * (t + lam)
    H = (M.T * (w * lamp)) @ M

    # q*lambda times second derivatives of the index
    d_dk = (rho / s) * (X.T @ wql)
    H[:px, ik] += d_dk
    H[ik, :px] += d_dk
    sW = W.T @ wql / (s * sigma)
    H[px:it, it] += rho * sW
    H[it, px:it] += rho * sW
    H[px:it, ik] -= sW
    H[ik, px:it] -= sW
    H[it, it] += (rho / s) * float(wql @ r)
    H[it, ik] -= float(wql @ r) / s
    H[ik, it] -= float(wql @ r) / s
    H[ik, ik] += float(wql @ (-r * rho * s + rho * m_kap + m * s * s))

    # normal first-stage part
    H[px:it, px:it] -= (W.T * w) @ W / sigma**2
    cross = -2.0 * (W.T @ (w * r)) / sigma
    H[px:it, it] += cross
    H[it, px:it] += cross
    H[it, it] -= 2.0 * float(w @ (r * r))
    return ll, grad, H
