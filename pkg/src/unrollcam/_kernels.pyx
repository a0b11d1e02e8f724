# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: direct circular filter-bank convolution and Poisson sampling.

Every routine here has a numpy twin in ``_kernels_py`` with the same
signature. Tap accumulation order matches the twin so the forward and
adjoint bank results are bit-identical between backends.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


cdef inline void _wrap_index(Py_ssize_t[::1] idx, Py_ssize_t n, Py_ssize_t shift) noexcept nogil:
    # idx[j] = (j - shift) mod n
    cdef Py_ssize_t j, v
    for j in range(n):
        v = j - shift
        while v < 0:
            v += n
        while v >= n:
            v -= n
        idx[j] = v


def bank_forward(const double[:, :, ::1] x, const double[:, :, ::1] filters):
    """out[c, i] = filters[i] (*) x[c], circular, kernel centred at (kh//2, kw//2)."""
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t m = filters.shape[0], kh = filters.shape[1], kw = filters.shape[2]
    cdef Py_ssize_t ch = kh // 2, cw = kw // 2
    cdef Py_ssize_t c, i, a, b, p, q, sp
    cdef double w
    cdef Py_ssize_t[::1] rows = np.empty(H, dtype=np.intp)
    cdef Py_ssize_t[::1] cols = np.empty(W, dtype=np.intp)
    out_arr = np.zeros((C, m, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        for c in range(C):
            for i in range(m):
                for a in range(kh):
                    _wrap_index(rows, H, a - ch)
                    for b in range(kw):
                        _wrap_index(cols, W, b - cw)
                        w = filters[i, a, b]
                        for p in range(H):
                            sp = rows[p]
                            for q in range(W):
                                out[c, i, p, q] = out[c, i, p, q] + w * x[c, sp, cols[q]]
    return out_arr


def bank_adjoint(const double[:, :, :, ::1] g, const double[:, :, ::1] filters):
    """out[c] = sum_i filters[i] (correlate) g[c, i]; transpose of ``bank_forward``."""
    cdef Py_ssize_t C = g.shape[0], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t m = filters.shape[0], kh = filters.shape[1], kw = filters.shape[2]
    cdef Py_ssize_t ch = kh // 2, cw = kw // 2
    cdef Py_ssize_t c, i, a, b, p, q, sp
    cdef double w
    cdef Py_ssize_t[::1] rows = np.empty(H, dtype=np.intp)
    cdef Py_ssize_t[::1] cols = np.empty(W, dtype=np.intp)
    out_arr = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for c in range(C):
            for i in range(m):
                for a in range(kh):
                    _wrap_index(rows, H, ch - a)
                    for b in range(kw):
                        _wrap_index(cols, W, cw - b)
                        w = filters[i, a, b]
                        for p in range(H):
                            sp = rows[p]
                            for q in range(W):
                                out[c, p, q] = out[c, p, q] + w * g[c, i, sp, cols[q]]
    return out_arr


def bank_filter_grad(const double[:, :, ::1] x, const double[:, :, :, ::1] g, Py_ssize_t kh, Py_ssize_t kw):
    """d<g, bank_forward(x, f)>/df, summed over colour channels."""
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t m = g.shape[1]
    cdef Py_ssize_t ch = kh // 2, cw = kw // 2
    cdef Py_ssize_t c, i, a, b, p, q, sp
    cdef double acc
    cdef Py_ssize_t[::1] rows = np.empty(H, dtype=np.intp)
    cdef Py_ssize_t[::1] cols = np.empty(W, dtype=np.intp)
    out_arr = np.zeros((m, kh, kw), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for a in range(kh):
            _wrap_index(rows, H, a - ch)
            for b in range(kw):
                _wrap_index(cols, W, b - cw)
                for i in range(m):
                    acc = 0.0
                    for c in range(C):
                        for p in range(H):
                            sp = rows[p]
                            for q in range(W):
                                acc = acc + g[c, i, p, q] * x[c, sp, cols[q]]
                    out[i, a, b] = acc
    return out_arr


def poisson_inverse_cdf(const double[::1] rates, const double[::1] uniforms, Py_ssize_t max_count=1000):
    """Smallest k with CDF(k; rate) >= u, per element."""
    cdef Py_ssize_t n = rates.shape[0], j, k
    cdef double lam, p, cdf, u
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for j in range(n):
        lam = rates[j]
        u = uniforms[j]
        p = exp(-lam)
        cdf = p
        k = 0
        while u > cdf and k < max_count:
            k += 1
            p = p * lam / k
            cdf = cdf + p
        out[j] = k
    return out_arr
