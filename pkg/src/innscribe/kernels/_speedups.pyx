# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused elementwise kernels for the coupling-layer hot path.

Each function does one pass over its operands where the numpy backend needs
two to four temporaries. Semantics match kernels._numpy_backend exactly up
to floating-point round-off (libm exp/atan vs numpy's vectorized variants).
"""

from libc.math cimport exp, atan

import numpy as np

NAME = "compiled"


def cexp(double[:, :] s, double c):
    cdef Py_ssize_t n = s.shape[0], m = s.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = exp(c * atan(s[i, j]))
    return out_arr


def cexp_vjp(double[:, :] g, double[:, :] s, double[:, :] w, double c):
    cdef Py_ssize_t n = s.shape[0], m = s.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = g[i, j] * w[i, j] * (c / (1.0 + s[i, j] * s[i, j]))
    return out_arr


def leaky(double[:, :] x, double alpha):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = x[i, j] if x[i, j] > 0.0 else alpha * x[i, j]
    return out_arr


def leaky_vjp(double[:, :] g, double[:, :] x, double alpha):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = g[i, j] if x[i, j] > 0.0 else alpha * g[i, j]
    return out_arr


def scale_shift(double[:, :] w, double[:, :] a, double[:, :] t):
    cdef Py_ssize_t n = w.shape[0], m = w.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = w[i, j] * a[i, j] + t[i, j]
    return out_arr


def unscale_shift(double[:, :] v, double[:, :] t, double[:, :] w):
    cdef Py_ssize_t n = v.shape[0], m = v.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = (v[i, j] - t[i, j]) / w[i, j]
    return out_arr
