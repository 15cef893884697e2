# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels. Mirrors ``_pykernels`` function for function."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, pow

cnp.import_array()

cdef double GELU_K = 1.702


def layer_norm_forward(double[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mean, var, c, r
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                xhat[i, j] = (x[i, j] - mean) * r
    return xhat_arr, rstd_arr


def layer_norm_backward(double[:, ::1] gout, double[:, ::1] xhat, double[::1] rstd):
    cdef Py_ssize_t n = gout.shape[0], d = gout.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double gm, gxm
    with nogil:
        for i in range(n):
            gm = 0.0
            gxm = 0.0
            for j in range(d):
                gm += gout[i, j]
                gxm += gout[i, j] * xhat[i, j]
            gm /= d
            gxm /= d
            for j in range(d):
                out[i, j] = (gout[i, j] - gm - xhat[i, j] * gxm) * rstd[i]
    return out_arr


def softmax_forward(double[:, ::1] s):
    cdef Py_ssize_t n = s.shape[0], d = s.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double m, tot
    with nogil:
        for i in range(n):
            m = s[i, 0]
            for j in range(1, d):
                if s[i, j] > m:
                    m = s[i, j]
            tot = 0.0
            for j in range(d):
                out[i, j] = exp(s[i, j] - m)
                tot += out[i, j]
            for j in range(d):
                out[i, j] /= tot
    return out_arr


def softmax_backward(double[:, ::1] gout, double[:, ::1] p):
    cdef Py_ssize_t n = p.shape[0], d = p.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += gout[i, j] * p[i, j]
            for j in range(d):
                out[i, j] = p[i, j] * (gout[i, j] - dot)
    return out_arr


def gelu_forward(double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    sig_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] sig = sig_arr
    cdef double s
    with nogil:
        for i in range(n):
            s = 1.0 / (1.0 + exp(-GELU_K * x[i]))
            sig[i] = s
            out[i] = x[i] * s
    return out_arr, sig_arr


def gelu_backward(double[::1] gout, double[::1] x, double[::1] sig):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = gout[i] * (sig[i] + GELU_K * x[i] * sig[i] * (1.0 - sig[i]))
    return out_arr


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long step):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double bc1 = 1.0 - pow(beta1, <double>step)
    cdef double bc2 = 1.0 - pow(beta2, <double>step)
    with nogil:
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] -= lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)
