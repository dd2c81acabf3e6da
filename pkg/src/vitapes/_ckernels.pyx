# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused row kernels (one pass per row, no temporaries).

Signatures mirror ``vitapes._kernels_py`` exactly.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, log, sqrt, erf, erff

cnp.import_array()

BACKEND = "cython"

cdef double SQRT1_2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] y = out
    cdef double mx, s, e
    with nogil:
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            if floating is float:
                for j in range(n):
                    y[i, j] = expf(x[i, j] - <float>mx)
                    s += y[i, j]
            else:
                for j in range(n):
                    e = exp(x[i, j] - mx)
                    y[i, j] = e
                    s += e
            s = 1.0 / s
            for j in range(n):
                y[i, j] = <floating>(y[i, j] * s)
    return out


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1], i, j
    out = np.empty((m, n), dtype=np.asarray(y).dtype)
    cdef floating[:, ::1] gx = out
    cdef double dot
    with nogil:
        for i in range(m):
            dot = 0.0
            for j in range(n):
                dot += gy[i, j] * y[i, j]
            for j in range(n):
                gx[i, j] = <floating>(y[i, j] * (gy[i, j] - dot))
    return out


def log_softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] y = out
    cdef double mx, s
    with nogil:
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            if floating is float:
                for j in range(n):
                    s += expf(x[i, j] - <float>mx)
            else:
                for j in range(n):
                    s += exp(x[i, j] - mx)
            s = log(s) + mx
            for j in range(n):
                y[i, j] = <floating>(x[i, j] - s)
    return out


def layernorm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    dt = np.asarray(x).dtype
    out = np.empty((m, n), dtype=dt)
    mean_arr = np.empty(m, dtype=dt)
    rstd_arr = np.empty(m, dtype=dt)
    cdef floating[:, ::1] y = out
    cdef floating[::1] mean = mean_arr
    cdef floating[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    with nogil:
        for i in range(m):
            mu = 0.0
            for j in range(n):
                mu += x[i, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mu
                var += d * d
            var /= n
            r = 1.0 / sqrt(var + eps)
            mean[i] = <floating>mu
            rstd[i] = <floating>r
            for j in range(n):
                y[i, j] = <floating>((x[i, j] - mu) * r * gamma[j] + beta[j])
    return out, mean_arr, rstd_arr


def layernorm_bwd(floating[:, ::1] gy, floating[:, ::1] x, floating[::1] mean,
                  floating[::1] rstd, floating[::1] gamma):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    dt = np.asarray(x).dtype
    out = np.empty((m, n), dtype=dt)
    cdef floating[:, ::1] gx = out
    cdef double[::1] gg = np.zeros(n, dtype=np.float64)
    cdef double[::1] gb = np.zeros(n, dtype=np.float64)
    cdef double a, b, xhat, gxh, r, mu
    with nogil:
        for i in range(m):
            mu = mean[i]
            r = rstd[i]
            a = 0.0
            b = 0.0
            for j in range(n):
                xhat = (x[i, j] - mu) * r
                gxh = gy[i, j] * gamma[j]
                a += gxh
                b += gxh * xhat
                gg[j] += gy[i, j] * xhat
                gb[j] += gy[i, j]
            a /= n
            b /= n
            for j in range(n):
                xhat = (x[i, j] - mu) * r
                gx[i, j] = <floating>(r * (gy[i, j] * gamma[j] - a - xhat * b))
    return out, np.asarray(gg).astype(dt), np.asarray(gb).astype(dt)


def gelu_fwd(floating[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] y = out
    cdef double v
    cdef float vf
    with nogil:
        for i in range(m):
            if floating is float:
                for j in range(n):
                    vf = x[i, j]
                    y[i, j] = 0.5 * vf * (1.0 + erff(vf * <float>SQRT1_2))
            else:
                for j in range(n):
                    v = x[i, j]
                    y[i, j] = 0.5 * v * (1.0 + erf(v * SQRT1_2))
    return out


def gelu_bwd(floating[:, ::1] x, floating[:, ::1] gy):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] gx = out
    cdef double v
    cdef float vf
    with nogil:
        for i in range(m):
            if floating is float:
                for j in range(n):
                    vf = x[i, j]
                    gx[i, j] = gy[i, j] * (0.5 * (1.0 + erff(vf * <float>SQRT1_2))
                                           + vf * <float>INV_SQRT_2PI * expf(-0.5 * vf * vf))
            else:
                for j in range(n):
                    v = x[i, j]
                    gx[i, j] = gy[i, j] * (0.5 * (1.0 + erf(v * SQRT1_2))
                                           + v * INV_SQRT_2PI * exp(-0.5 * v * v))
    return out


def leaky_relu_fwd(floating[:, ::1] x, double alpha):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] y = out
    cdef floating a = <floating>alpha
    with nogil:
        for i in range(m):
            for j in range(n):
                if x[i, j] >= 0:
                    y[i, j] = x[i, j]
                else:
                    y[i, j] = a * x[i, j]
    return out


def leaky_relu_bwd(floating[:, ::1] x, floating[:, ::1] gy, double alpha):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] gx = out
    cdef floating a = <floating>alpha
    with nogil:
        for i in range(m):
            for j in range(n):
                if x[i, j] >= 0:
                    gx[i, j] = gy[i, j]
                else:
                    gx[i, j] = a * gy[i, j]
    return out
