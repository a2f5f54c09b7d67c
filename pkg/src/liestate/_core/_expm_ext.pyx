# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled batched matrix exponential (scaling-and-squaring + Taylor).

Same contract and cache layout as ``_expm_py``: one C loop per matrix
instead of one numpy call per Horner/squaring stage.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport ldexp

cnp.import_array()

ctypedef fused scalar_t:
    double
    double complex

cdef enum:
    TAYLOR_ORDER_C = 12

TAYLOR_ORDER = TAYLOR_ORDER_C
MAX_SQUARINGS = 64


cdef inline scalar_t _conj(scalar_t z) noexcept nogil:
    if scalar_t is double:
        return z
    else:
        return z.conjugate()


cdef void _mm(scalar_t* a, scalar_t* b, scalar_t* c, Py_ssize_t d) noexcept nogil:
    # c = a @ b
    cdef Py_ssize_t i, j, k
    cdef scalar_t aik
    for i in range(d * d):
        c[i] = 0
    for i in range(d):
        for k in range(d):
            aik = a[i * d + k]
            for j in range(d):
                c[i * d + j] += aik * b[k * d + j]


cdef void _mm_ah_b(scalar_t* a, scalar_t* b, scalar_t* c, Py_ssize_t d) noexcept nogil:
    # c = a^H @ b
    cdef Py_ssize_t i, j, k
    cdef scalar_t aki
    for i in range(d * d):
        c[i] = 0
    for k in range(d):
        for i in range(d):
            aki = _conj(a[k * d + i])
            for j in range(d):
                c[i * d + j] += aki * b[k * d + j]


cdef void _mm_a_bh(scalar_t* a, scalar_t* b, scalar_t* c, scalar_t* scratch,
                   Py_ssize_t d) noexcept nogil:
    # c = a @ b^H; b^H is materialized so the product runs in axpy order
    cdef Py_ssize_t i, j
    for i in range(d):
        for j in range(d):
            scratch[j * d + i] = _conj(b[i * d + j])
    _mm(a, scratch, c, d)


cdef void _forward_one(scalar_t* a, scalar_t* scaled, scalar_t* q, scalar_t* x,
                       scalar_t* tmp, Py_ssize_t d, int s, Py_ssize_t qstride,
                       Py_ssize_t xstride) noexcept nogil:
    # q and x point at this matrix's slot in stage 0; stages are qstride/xstride apart
    cdef Py_ssize_t i, k, m, dd = d * d
    cdef double factor = ldexp(1.0, -s)
    cdef scalar_t* qk
    cdef scalar_t* qkm1
    for i in range(dd):
        scaled[i] = a[i] * factor
    qk = q + TAYLOR_ORDER_C * qstride
    for i in range(dd):
        qk[i] = 0
    for i in range(d):
        qk[i * d + i] = 1
    for k in range(TAYLOR_ORDER_C, 0, -1):
        qk = q + k * qstride
        qkm1 = q + (k - 1) * qstride
        _mm(scaled, qk, tmp, d)
        for i in range(dd):
            qkm1[i] = tmp[i] / k
        for i in range(d):
            qkm1[i * d + i] = qkm1[i * d + i] + 1
    for i in range(dd):
        x[i] = q[i]
    for m in range(s):
        _mm(x + m * xstride, x + m * xstride, x + (m + 1) * xstride, d)


def _forward_impl(scalar_t[:, :, ::1] a, long[::1] s, int smax, bint keep_cache):
    cdef Py_ssize_t n = a.shape[0], d = a.shape[1], b, m, i, dd
    dd = d * d
    dtype = np.float64 if scalar_t is double else np.complex128
    scaled_arr = np.empty((n, d, d), dtype=dtype)
    q_arr = np.empty((TAYLOR_ORDER_C + 1, n, d, d), dtype=dtype)
    x_arr = np.empty((smax + 1, n, d, d), dtype=dtype)
    out_arr = np.empty((n, d, d), dtype=dtype)
    tmp_arr = np.empty((d, d), dtype=dtype)
    cdef scalar_t[:, :, ::1] scaled = scaled_arr
    cdef scalar_t[:, :, :, ::1] q = q_arr
    cdef scalar_t[:, :, :, ::1] x = x_arr
    cdef scalar_t[:, :, ::1] out = out_arr
    cdef scalar_t[:, ::1] tmp = tmp_arr
    cdef Py_ssize_t qstride = n * dd, xstride = n * dd
    cdef int sb
    if n == 0:
        return out_arr, ((np.asarray(s), scaled_arr, q_arr, x_arr) if keep_cache else None)
    with nogil:
        for b in range(n):
            sb = s[b]
            _forward_one(&a[b, 0, 0], &scaled[b, 0, 0], &q[0, b, 0, 0], &x[0, b, 0, 0],
                         &tmp[0, 0], d, sb, qstride, xstride)
            # inactive squaring stages carry the last value forward (matches the numpy layout)
            for m in range(sb, smax):
                for i in range(dd):
                    (&x[m + 1, b, 0, 0])[i] = (&x[m, b, 0, 0])[i]
            for i in range(dd):
                (&out[b, 0, 0])[i] = (&x[smax, b, 0, 0])[i]
    if not keep_cache:
        return out_arr, None
    return out_arr, (np.asarray(s), scaled_arr, q_arr, x_arr)


def _backward_impl(scalar_t[:, :, ::1] scaled, scalar_t[:, :, :, ::1] q,
                   scalar_t[:, :, :, ::1] x, long[::1] s, scalar_t[:, :, ::1] grad):
    cdef Py_ssize_t n = scaled.shape[0], d = scaled.shape[1], b, m, i, k, dd
    dd = d * d
    dtype = np.float64 if scalar_t is double else np.complex128
    out_arr = np.zeros((n, d, d), dtype=dtype)
    work = np.empty((5, d, d), dtype=dtype)
    cdef scalar_t[:, :, ::1] out = out_arr
    cdef scalar_t[:, :, ::1] w = work
    cdef scalar_t* g = &w[0, 0, 0]
    cdef scalar_t* t1 = &w[1, 0, 0]
    cdef scalar_t* t2 = &w[2, 0, 0]
    cdef scalar_t* gq = &w[3, 0, 0]
    cdef scalar_t* sc = &w[4, 0, 0]
    cdef scalar_t* xm
    cdef scalar_t* ob
    cdef double factor
    if n == 0:
        return out_arr
    with nogil:
        for b in range(n):
            for i in range(dd):
                g[i] = (&grad[b, 0, 0])[i]
            for m in range(s[b] - 1, -1, -1):
                xm = &x[m, b, 0, 0]
                _mm_a_bh(g, xm, t1, sc, d)
                _mm_ah_b(xm, g, t2, d)
                for i in range(dd):
                    g[i] = t1[i] + t2[i]
            ob = &out[b, 0, 0]
            for i in range(dd):
                gq[i] = g[i]
            for k in range(1, TAYLOR_ORDER_C + 1):
                _mm_a_bh(gq, &q[k, b, 0, 0], t1, sc, d)
                for i in range(dd):
                    ob[i] = ob[i] + t1[i] / k
                _mm_ah_b(&scaled[b, 0, 0], gq, t2, d)
                for i in range(dd):
                    gq[i] = t2[i] / k
            factor = ldexp(1.0, -s[b])
            for i in range(dd):
                ob[i] = ob[i] * factor
    return out_arr


def squaring_counts(onenorms):
    onenorms = np.asarray(onenorms, dtype=np.float64)
    s = np.zeros(onenorms.shape, dtype=np.int64)
    pos = onenorms > 0
    s[pos] = np.maximum(0, np.ceil(np.log2(onenorms[pos])).astype(np.int64) + 1)
    return s


def expm_forward(a, keep_cache=True):
    a = np.ascontiguousarray(a)
    n = a.shape[0]
    onenorm = np.abs(a).sum(axis=-2).max(axis=-1) if n else np.zeros(0)
    s = np.ascontiguousarray(squaring_counts(onenorm), dtype=np.int_)
    smax = int(s.max()) if n else 0
    return _forward_impl(a, s, smax, keep_cache)


def expm_backward(cache, grad):
    s, scaled, q, x = cache
    grad = np.ascontiguousarray(grad, dtype=scaled.dtype)
    return _backward_impl(scaled, q, x, np.ascontiguousarray(s, dtype=np.int_), grad)
