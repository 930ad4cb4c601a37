# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled codec and attention kernels.

Must stay numerically identical (bit-for-bit on the codec, within float
reassociation on attention) to :mod:`adakv._pykernels`.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, exp, sqrt

cnp.import_array()


def quantize_rows(const double[:, ::1] x, int bits):
    """Row-wise affine min-max quantization for ``bits`` < 16.

    Returns ``(codes, scale, zero)``; codes are float64 holding integers.
    """
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double levels = <double>((1 << bits) - 1)
    cdef double lo, hi, s, v
    codes_arr = np.empty((n, d), dtype=np.float64)
    scale_arr = np.empty(n, dtype=np.float64)
    zero_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] codes = codes_arr
    cdef double[::1] scale = scale_arr
    cdef double[::1] zero = zero_arr
    for i in range(n):
        lo = x[i, 0]
        hi = x[i, 0]
        for j in range(1, d):
            v = x[i, j]
            if v < lo:
                lo = v
            elif v > hi:
                hi = v
        zero[i] = lo
        if hi == lo:
            scale[i] = 0.0
            for j in range(d):
                codes[i, j] = 0.0
            continue
        s = (hi - lo) / levels
        scale[i] = s
        for j in range(d):
            # argument is >= 0, so floor(v + 0.5) rounds half away from zero
            v = floor((x[i, j] - lo) / s + 0.5)
            if v > levels:
                v = levels
            elif v < 0.0:
                v = 0.0
            codes[i, j] = v
    return codes_arr, scale_arr, zero_arr


def hetero_attention(
    const double[:, ::1] q,
    const double[:, :, ::1] k_pay,
    const double[:, ::1] k_scale,
    const double[:, ::1] k_zero,
    const double[:, :, ::1] v_pay,
    const double[:, ::1] v_scale,
    const double[:, ::1] v_zero,
    Py_ssize_t n,
    self_k=None,
    self_v=None,
):
    """Scaled dot-product attention over the first ``n`` cached positions.

    Cache rows are reconstructed as ``zero + scale * payload`` while they are
    read. ``self_k``/``self_v`` (h x d), when given, append one extra exact
    position. Returns ``(out[h, d], sum of squared weights per head)``.
    """
    cdef Py_ssize_t h = q.shape[0], d = q.shape[1]
    cdef Py_ssize_t m = n + (1 if self_k is not None else 0)
    if m == 0:
        raise ValueError("attention over an empty cache")
    cdef double[:, ::1] sk
    cdef double[:, ::1] sv
    cdef bint has_self = self_k is not None
    if has_self:
        sk = np.ascontiguousarray(self_k, dtype=np.float64)
        sv = np.ascontiguousarray(self_v, dtype=np.float64)
    out_arr = np.zeros((h, d), dtype=np.float64)
    sq_arr = np.zeros(h, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] sq = sq_arr
    w_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] w = w_arr
    cdef double inv = 1.0 / sqrt(<double>d)
    cdef Py_ssize_t i, t, j
    cdef double acc, mx, total, a, z, s
    for i in range(h):
        mx = -1e308
        for t in range(n):
            z = k_zero[t, i]
            s = k_scale[t, i]
            acc = 0.0
            for j in range(d):
                acc += q[i, j] * (z + s * k_pay[t, i, j])
            acc *= inv
            w[t] = acc
            if acc > mx:
                mx = acc
        if has_self:
            acc = 0.0
            for j in range(d):
                acc += q[i, j] * sk[i, j]
            acc *= inv
            w[n] = acc
            if acc > mx:
                mx = acc
        total = 0.0
        for t in range(m):
            w[t] = exp(w[t] - mx)
            total += w[t]
        acc = 0.0
        for t in range(m):
            w[t] /= total
            acc += w[t] * w[t]
        sq[i] = acc
        for t in range(n):
            a = w[t]
            z = v_zero[t, i]
            s = v_scale[t, i]
            for j in range(d):
                out[i, j] += a * (z + s * v_pay[t, i, j])
        if has_self:
            a = w[n]
            for j in range(d):
                out[i, j] += a * sv[i, j]
    return out_arr, sq_arr
