# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled elementwise and resampling kernels.

Semantics are identical to :mod:`valuestitch._pykernels`; see that module
for the reference definitions.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def silu_forward(const double[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    sig = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[:, ::1] s = sig
    cdef double v, sv
    with nogil:
        for i in range(n):
            for j in range(m):
                v = z[i, j]
                sv = _sigmoid(v)
                s[i, j] = sv
                o[i, j] = v * sv
    return out, sig


def silu_backward(const double[:, ::1] g, const double[:, ::1] z, const double[:, ::1] sig):
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1], i, j
    if g.shape[0] != n or g.shape[1] != m or sig.shape[0] != n or sig.shape[1] != m:
        raise ValueError("silu_backward: shape mismatch")
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double sv
    with nogil:
        for i in range(n):
            for j in range(m):
                sv = sig[i, j]
                o[i, j] = g[i, j] * (sv + z[i, j] * sv * (1.0 - sv))
    return out


def inverse_cdf(const double[::1] weights, const double[::1] uniforms):
    cdef Py_ssize_t n = weights.shape[0], m = uniforms.shape[0], i, lo, hi, mid
    cdef double total = 0.0, u
    if n == 0:
        raise ValueError("inverse_cdf: empty weights")
    cum_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] cum = cum_arr
    for i in range(n):
        if weights[i] < 0.0:
            raise ValueError("inverse_cdf: negative weight")
        total += weights[i]
        cum[i] = total
    if not total > 0.0:
        raise ValueError("inverse_cdf: weights sum to zero")
    idx_arr = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] idx = idx_arr
    with nogil:
        for i in range(m):
            u = uniforms[i] * total
            lo = 0
            hi = n - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if cum[mid] > u:
                    hi = mid
                else:
                    lo = mid + 1
            idx[i] = lo
    return idx_arr
