# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled likelihood kernels.  Same contract as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, cosh, log, M_PI
from scipy.special.cython_special cimport log_ndtr

cnp.import_array()

cdef double LOG_SQRT_2PI = 0.5 * log(2.0 * M_PI)


cdef inline double _mills(double t, double logcdf) nogil:
    return exp(-0.5 * t * t - LOG_SQRT_2PI - logcdf)


def probit_derivs(X, y, w, beta, int order=2):
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], p = Xv.shape[1], i, j, k
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    cdef double[::1] g = grad
    cdef double[:, ::1] H = hess
    cdef double ll = 0.0, xb, q, t, lc, lam, a, wi
    with nogil:
        for i in range(n):
            xb = 0.0
            for j in range(p):
                xb = xb + Xv[i, j] * bv[j]
            q = 2.0 * yv[i] - 1.0
            t = q * xb
            lc = log_ndtr(t)
            wi = wv[i]
            ll = ll + wi * lc
            if order == 0:
                continue
            lam = _mills(t, lc)
            a = wi * q * lam
            for j in range(p):
                g[j] = g[j] + a * Xv[i, j]
            if order < 2:
                continue
            a = wi * lam * (lam + t)
            for j in range(p):
                for k in range(j + 1):
                    H[j, k] = H[j, k] - a * Xv[i, j] * Xv[i, k]
    if order == 0:
        return ll, None, None
    if order == 1:
        return ll, grad, None
    for j in range(p):
        for k in range(j):
            H[k, j] = H[j, k]
    return ll, grad, hess


def cf_joint_derivs(X, W, y, db, w, params, int order=2):
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Wv = np.ascontiguousarray(W, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] dv = np.ascontiguousarray(db, dtype=np.float64)
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] pv = np.ascontiguousarray(params, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], px = Xv.shape[1], pw = Wv.shape[1]
    cdef Py_ssize_t P = px + pw + 2, it = px + pw, ik = px + pw + 1
    cdef Py_ssize_t i, j, k
    cdef double tau = pv[it], kappa = pv[ik]
    cdef double sigma = exp(tau), rho = tanh(kappa), s = 1.0 / cosh(kappa)
    cdef double ll = 0.0, wi, r, xd, m, q, t, lc, lam, lamp, wql, m_tau, m_kap
    grad = np.zeros(P)
    hess = np.zeros((P, P))
    mrow_arr = np.empty(P)
    cdef double[::1] g = grad
    cdef double[:, ::1] H = hess
    cdef double[::1] M = mrow_arr
    cdef double c_theta = -rho / (s * sigma)
    with nogil:
        for i in range(n):
            wi = wv[i]
            r = dv[i]
            for j in range(pw):
                r = r - Wv[i, j] * pv[px + j]
            r = r / sigma
            xd = 0.0
            for j in range(px):
                xd = xd + Xv[i, j] * pv[j]
            m = (xd + rho * r) / s
            q = 2.0 * yv[i] - 1.0
            t = q * m
            lc = log_ndtr(t)
            ll = ll + wi * (-0.5 * r * r - tau - LOG_SQRT_2PI + lc)
            if order == 0:
                continue
            lam = _mills(t, lc)
            wql = wi * q * lam
            m_tau = -(rho / s) * r
            m_kap = r * s + m * rho
            for j in range(px):
                M[j] = Xv[i, j] / s
            for j in range(pw):
                M[px + j] = c_theta * Wv[i, j]
            M[it] = m_tau
            M[ik] = m_kap
            for j in range(P):
                g[j] = g[j] + wql * M[j]
            for j in range(pw):
                g[px + j] = g[px + j] + wi * r * Wv[i, j] / sigma
            g[it] = g[it] + wi * (r * r - 1.0)
            if order < 2:
                continue
            lamp = -lam * (t + lam) * wi
            for j in range(P):
                for k in range(j + 1):
                    H[j, k] = H[j, k] + lamp * M[j] * M[k]
            # second derivatives of the index (lower triangle: row > col)
            for j in range(px):
                H[ik, j] = H[ik, j] + wql * (rho / s) * Xv[i, j]
            for j in range(pw):
                H[it, px + j] = H[it, px + j] + wql * rho * Wv[i, j] / (s * sigma) \
                    - 2.0 * wi * r * Wv[i, j] / sigma
                H[ik, px + j] = H[ik, px + j] - wql * Wv[i, j] / (s * sigma)
                for k in range(j + 1):
                    H[px + j, px + k] = H[px + j, px + k] - wi * Wv[i, j] * Wv[i, k] / (sigma * sigma)
            H[it, it] = H[it, it] + wql * (rho / s) * r - 2.0 * wi * r * r
            H[ik, it] = H[ik, it] - wql * r / s
            H[ik, ik] = H[ik, ik] + wql * (-r * rho * s + rho * m_kap + m * s * s)
    if order == 0:
        return ll, None, None
    if order == 1:
        return ll, grad, None
    for j in range(P):
        for k in range(j):
            H[k, j] = H[j, k]
    return ll, grad, hess
