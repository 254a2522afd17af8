# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: same contract as eepipe._pykernels.

Fused loops avoid the temporaries the numpy fallback allocates; `dot_rows`
accumulates along k in ascending order per output element, matching the
fallback's einsum reduction order guarantee.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, log, sqrt

cnp.import_array()

cdef double INV_SQRT2 = 1.0 / sqrt(2.0)
cdef double INV_SQRT_2PI = 1.0 / sqrt(2.0 * 3.141592653589793238462643383279502884)


def gelu_fwd(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        ov[i] = 0.5 * xv[i] * (1.0 + erf(xv[i] * INV_SQRT2))
    return out


def gelu_bwd(x, gout):
    x = np.ascontiguousarray(x, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    gx = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] gv = gout.ravel()
    cdef double[::1] ov = gx.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double phi
    for i in range(n):
        phi = exp(-0.5 * xv[i] * xv[i]) * INV_SQRT_2PI
        ov[i] = gv[i] * (0.5 * (1.0 + erf(xv[i] * INV_SQRT2)) + xv[i] * phi)
    return gx


def rmsnorm_fwd(x, w, double eps):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[::1] wv = w
    cdef Py_ssize_t n = xv.shape[0], h = xv.shape[1], i, j
    out = np.empty((n, h), dtype=np.float64)
    inv_rms = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[::1] rv = inv_rms
    cdef double ms, r
    for i in range(n):
        ms = 0.0
        for j in range(h):
            ms += xv[i, j] * xv[i, j]
        r = 1.0 / sqrt(ms / h + eps)
        rv[i] = r
        for j in range(h):
            ov[i, j] = xv[i, j] * r * wv[j]
    return out, inv_rms


def rmsnorm_bwd(x, w, inv_rms, gout):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    inv_rms = np.ascontiguousarray(inv_rms, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[:, ::1] xv = x, gv = gout
    cdef double[::1] wv = w, rv = inv_rms
    cdef Py_ssize_t n = xv.shape[0], h = xv.shape[1], i, j
    gx = np.empty((n, h), dtype=np.float64)
    gw = np.zeros(h, dtype=np.float64)
    cdef double[:, ::1] gxv = gx
    cdef double[::1] gwv = gw
    cdef double r, gwx
    for i in range(n):
        r = rv[i]
        gwx = 0.0
        for j in range(h):
            gwx += gv[i, j] * wv[j] * xv[i, j]
            gwv[j] += gv[i, j] * xv[i, j] * r
        for j in range(h):
            gxv[i, j] = gv[i, j] * wv[j] * r - xv[i, j] * (r * r * r * gwx / h)
    return gx, gw


def softmax_fwd(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef Py_ssize_t n = xv.shape[0], k = xv.shape[1], i, j
    p = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] pv = p
    cdef double m, z
    for i in range(n):
        m = xv[i, 0]
        for j in range(1, k):
            if xv[i, j] > m:
                m = xv[i, j]
        z = 0.0
        for j in range(k):
            pv[i, j] = exp(xv[i, j] - m)
            z += pv[i, j]
        for j in range(k):
            pv[i, j] /= z
    return p


def softmax_bwd(p, gout):
    p = np.ascontiguousarray(p, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[:, ::1] pv = p, gv = gout
    cdef Py_ssize_t n = pv.shape[0], k = pv.shape[1], i, j
    gx = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] gxv = gx
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += pv[i, j] * gv[i, j]
        for j in range(k):
            gxv[i, j] = pv[i, j] * (gv[i, j] - dot)
    return gx


def cross_entropy_fwd(logits, targets):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    cdef double[:, ::1] xv = logits
    cdef long long[::1] tv = targets
    cdef Py_ssize_t n = xv.shape[0], v = xv.shape[1], i, j
    probs = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] pv = probs
    cdef double m, z, loss = 0.0
    for i in range(n):
        m = xv[i, 0]
        for j in range(1, v):
            if xv[i, j] > m:
                m = xv[i, j]
        z = 0.0
        for j in range(v):
            pv[i, j] = exp(xv[i, j] - m)
            z += pv[i, j]
        for j in range(v):
            pv[i, j] /= z
        loss -= (xv[i, tv[i]] - m) - log(z)
    return loss / n, probs


def cross_entropy_bwd(probs, targets, double gout):
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    cdef double[:, ::1] pv = probs
    cdef long long[::1] tv = targets
    cdef Py_ssize_t n = pv.shape[0], v = pv.shape[1], i, j
    g = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] gv = g
    cdef double c = gout / n
    for i in range(n):
        for j in range(v):
            gv[i, j] = pv[i, j] * c
        gv[i, tv[i]] -= c
    return g


def attention_fwd(q, k, v, double scale):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[:, :, :, ::1] qv = q, kv = k, vv = v
    cdef Py_ssize_t b = qv.shape[0], nh = qv.shape[1], s = qv.shape[2], d = qv.shape[3]
    out = np.zeros((b, nh, s, d), dtype=np.float64)
    probs = np.zeros((b, nh, s, s), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out, pv = probs
    cdef Py_ssize_t bi, hi, i, j, di
    cdef double m, z, acc
    for bi in range(b):
        for hi in range(nh):
            for i in range(s):
                m = -1e300
                for j in range(i + 1):
                    acc = 0.0
                    for di in range(d):
                        acc += qv[bi, hi, i, di] * kv[bi, hi, j, di]
                    acc *= scale
                    pv[bi, hi, i, j] = acc
                    if acc > m:
                        m = acc
                z = 0.0
                for j in range(i + 1):
                    pv[bi, hi, i, j] = exp(pv[bi, hi, i, j] - m)
                    z += pv[bi, hi, i, j]
                for j in range(i + 1):
                    pv[bi, hi, i, j] /= z
                for j in range(i + 1):
                    for di in range(d):
                        ov[bi, hi, i, di] += pv[bi, hi, i, j] * vv[bi, hi, j, di]
    return out, probs


def attention_bwd(q, k, v, probs, double scale, gout):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[:, :, :, ::1] qv = q, kv = k, vv = v, pv = probs, gv = gout
    cdef Py_ssize_t b = qv.shape[0], nh = qv.shape[1], s = qv.shape[2], d = qv.shape[3]
    gq = np.zeros((b, nh, s, d), dtype=np.float64)
    gk = np.zeros((b, nh, s, d), dtype=np.float64)
    gvv = np.zeros((b, nh, s, d), dtype=np.float64)
    gprow = np.empty(s, dtype=np.float64)
    cdef double[:, :, :, ::1] gqv = gq, gkv = gk, gvvv = gvv
    cdef double[::1] gp = gprow
    cdef Py_ssize_t bi, hi, i, j, di
    cdef double dot, gs
    for bi in range(b):
        for hi in range(nh):
            for i in range(s):
                dot = 0.0
                for j in range(i + 1):
                    gp[j] = 0.0
                    for di in range(d):
                        gp[j] += gv[bi, hi, i, di] * vv[bi, hi, j, di]
                    dot += pv[bi, hi, i, j] * gp[j]
                for j in range(i + 1):
                    gs = pv[bi, hi, i, j] * (gp[j] - dot) * scale
                    for di in range(d):
                        gqv[bi, hi, i, di] += gs * kv[bi, hi, j, di]
                        gkv[bi, hi, j, di] += gs * qv[bi, hi, i, di]
                        gvvv[bi, hi, j, di] += pv[bi, hi, i, j] * gv[bi, hi, i, di]
    return gq, gk, gvv


def dot_rows(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[:, ::1] av = a, bv = b
    cdef Py_ssize_t m = av.shape[0], kk = av.shape[1], n = bv.shape[1], i, j, t
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(kk):
                acc += av[i, t] * bv[t, j]
            ov[i, j] = acc
    return out
