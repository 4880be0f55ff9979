# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels; same contracts as ``xda._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, log, logf, sqrt

ctypedef fused real:
    float
    double

cnp.import_array()


cdef inline real _exp(real v) noexcept nogil:
    if real is float:
        return expf(v)
    else:
        return exp(v)


cdef inline real _log(real v) noexcept nogil:
    if real is float:
        return logf(v)
    else:
        return log(v)


def softmax_fwd(real[:, ::1] x, double scale):
    cdef Py_ssize_t r, j, n = x.shape[1], rows = x.shape[0]
    out = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    cdef real m, v, sc = <real>scale
    cdef double s
    cdef real inv
    with nogil:
        for r in range(rows):
            m = x[r, 0]
            for j in range(1, n):
                if x[r, j] > m:
                    m = x[r, j]
            for j in range(n):
                y[r, j] = _exp((x[r, j] - m) * sc)
            s = 0.0
            for j in range(n):
                s += y[r, j]
            inv = <real>(1.0 / s)
            for j in range(n):
                y[r, j] = y[r, j] * inv
    return out


def softmax_bwd(real[:, ::1] y, real[:, ::1] g, double scale):
    cdef Py_ssize_t r, j, n = y.shape[1], rows = y.shape[0]
    out = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] gx = out
    cdef double dot
    with nogil:
        for r in range(rows):
            dot = 0.0
            for j in range(n):
                dot += g[r, j] * y[r, j]
            for j in range(n):
                gx[r, j] = <real>((g[r, j] - dot) * y[r, j] * scale)
    return out


def layernorm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t r, j, n = x.shape[1], rows = x.shape[0]
    dt = np.float32 if real is float else np.float64
    out = np.empty((rows, n), dtype=dt)
    xhat_a = np.empty((rows, n), dtype=dt)
    rstd_a = np.empty(rows, dtype=dt)
    cdef real[:, ::1] y = out
    cdef real[:, ::1] xh = xhat_a
    cdef real[::1] rs = rstd_a
    cdef double mu, var, d, inv
    with nogil:
        for r in range(rows):
            mu = 0.0
            for j in range(n):
                mu += x[r, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[r, j] - mu
                var += d * d
            inv = 1.0 / sqrt(var / n + eps)
            rs[r] = <real>inv
            for j in range(n):
                d = (x[r, j] - mu) * inv
                xh[r, j] = <real>d
                y[r, j] = <real>(d * gamma[j] + beta[j])
    return out, xhat_a, rstd_a


def layernorm_bwd(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t r, j, n = g.shape[1], rows = g.shape[0]
    dt = np.float32 if real is float else np.float64
    gx_a = np.empty((rows, n), dtype=dt)
    dgamma_a = np.zeros(n, dtype=np.float64)
    dbeta_a = np.zeros(n, dtype=np.float64)
    cdef real[:, ::1] gx = gx_a
    cdef double[::1] dgamma = dgamma_a
    cdef double[::1] dbeta = dbeta_a
    cdef double m1, m2, gh
    with nogil:
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(n):
                gh = g[r, j] * gamma[j]
                m1 += gh
                m2 += gh * xhat[r, j]
                dgamma[j] += g[r, j] * xhat[r, j]
                dbeta[j] += g[r, j]
            m1 /= n
            m2 /= n
            for j in range(n):
                gx[r, j] = <real>((g[r, j] * gamma[j] - m1 - xhat[r, j] * m2) * rstd[r])
    return gx_a, dgamma_a.astype(dt), dbeta_a.astype(dt)


def log_softmax_ce(real[:, ::1] logits, real[:, ::1] target, real[::1] weight):
    cdef Py_ssize_t r, j, n = logits.shape[1], rows = logits.shape[0]
    grad_a = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] grad = grad_a
    cdef real m, lse
    cdef double s, tw, twsum, total = 0.0
    with nogil:
        for r in range(rows):
            m = logits[r, 0]
            for j in range(1, n):
                if logits[r, j] > m:
                    m = logits[r, j]
            s = 0.0
            for j in range(n):
                s += _exp(logits[r, j] - m)
            lse = m + <real>log(s)
            twsum = 0.0
            for j in range(n):
                tw = target[r, j] * weight[r]
                twsum += tw
                total -= tw * (logits[r, j] - lse)
            for j in range(n):
                grad[r, j] = <real>(_exp(logits[r, j] - lse) * twsum - target[r, j] * weight[r])
    return total, grad_a


def kl_terms(real[:, ::1] p, real[:, ::1] q, double eps):
    cdef Py_ssize_t r, j, n = p.shape[1], rows = p.shape[0]
    out = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] t = out
    cdef real pv, qv, e = <real>eps
    with nogil:
        for r in range(rows):
            for j in range(n):
                pv = p[r, j]
                qv = q[r, j]
                pv = pv if pv > e else e
                qv = qv if qv > e else e
                t[r, j] = p[r, j] * _log(pv / qv)
    return out


def kl_grad_q(real[:, ::1] p, real[:, ::1] q, real[:, ::1] g, double eps):
    cdef Py_ssize_t r, j, n = p.shape[1], rows = p.shape[0]
    out = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] gq = out
    with nogil:
        for r in range(rows):
            for j in range(n):
                if q[r, j] > eps:
                    gq[r, j] = <real>(-g[r, j] * p[r, j] / q[r, j])
                else:
                    gq[r, j] = 0
    return out
