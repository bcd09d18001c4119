# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Monte-Carlo kernels; same API as ``_pykernels``.

The loops fuse feature evaluation with moment accumulation so the (n, p)
feature matrix is never materialised.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline void _softmax(double* logits, Py_ssize_t K) noexcept nogil:
    cdef Py_ssize_t i
    cdef double mx = logits[0], tot = 0.0
    for i in range(1, K):
        if logits[i] > mx:
            mx = logits[i]
    for i in range(K):
        logits[i] = exp(logits[i] - mx)
        tot += logits[i]
    for i in range(K):
        logits[i] /= tot


cdef void _gating_row(const double[:] z, const double[:, :] w, const double[:] half_sq,
                      const double[:, :] T, double* pi, double* diff, double* out) noexcept nogil:
    cdef Py_ssize_t K = w.shape[0], q = w.shape[1], r = T.shape[0]
    cdef Py_ssize_t i, a, b, base
    cdef double acc
    for i in range(K):
        acc = -half_sq[i]
        for a in range(q):
            acc += z[a] * w[i, a]
        pi[i] = acc
    _softmax(pi, K)
    for i in range(K):
        base = i * (r + 1)
        for a in range(q):
            diff[a] = z[a] - w[i, a]
        for a in range(r):
            acc = 0.0
            for b in range(q):
                acc += T[a, b] * diff[b]
            out[base + a] = pi[i] * acc
        out[base + r] = pi[i]


def gating_features(z, w, T):
    cdef const double[:, :] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, :] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, :] Tv = np.ascontiguousarray(T, dtype=np.float64)
    cdef Py_ssize_t n = zv.shape[0], K = wv.shape[0], q = wv.shape[1], r = Tv.shape[0]
    cdef Py_ssize_t p = K * (r + 1)
    cdef double[:] half_sq = 0.5 * np.sum(np.asarray(wv) ** 2, axis=1)
    res = np.empty((n, p))
    cdef double[:, ::1] out = res
    cdef double* pi = <double*> malloc(K * sizeof(double))
    cdef double* diff = <double*> malloc(q * sizeof(double) + 8)
    cdef Py_ssize_t t
    try:
        with nogil:
            for t in range(n):
                _gating_row(zv[t], wv, half_sq, Tv, pi, diff, &out[t, 0])
    finally:
        free(pi)
        free(diff)
    return res


def gating_moments(z, w, T, g=None):
    cdef const double[:, :] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, :] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, :] Tv = np.ascontiguousarray(T, dtype=np.float64)
    cdef Py_ssize_t n = zv.shape[0], K = wv.shape[0], q = wv.shape[1], r = Tv.shape[0]
    cdef Py_ssize_t p = K * (r + 1)
    cdef bint has_g = g is not None
    cdef const double[:] gv = np.ascontiguousarray(g if has_g else np.zeros(1), dtype=np.float64)
    cdef double[:] half_sq = 0.5 * np.sum(np.asarray(wv) ** 2, axis=1)
    S_arr = np.zeros((p, p))
    c_arr = np.zeros(p)
    cdef double[:, ::1] S = S_arr
    cdef double[::1] c = c_arr
    cdef double* pi = <double*> malloc(K * sizeof(double))
    cdef double* diff = <double*> malloc(q * sizeof(double) + 8)
    cdef double* phi = <double*> malloc(p * sizeof(double))
    cdef Py_ssize_t t, a, b
    cdef double fa
    try:
        with nogil:
            for t in range(n):
                _gating_row(zv[t], wv, half_sq, Tv, pi, diff, phi)
                for a in range(p):
                    fa = phi[a]
                    if fa == 0.0:
                        continue
                    for b in range(a, p):
                        S[a, b] += fa * phi[b]
                    if has_g:
                        c[a] += fa * gv[t]
    finally:
        free(pi)
        free(diff)
        free(phi)
    S_arr = np.triu(S_arr) + np.triu(S_arr, 1).T
    return S_arr / n, c_arr / n


def mixture_responsibilities(x, centers):
    cdef const double[:, :] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :] uv = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], K = uv.shape[0], d = uv.shape[1]
    cdef double[:] half_sq = 0.5 * np.sum(np.asarray(uv) ** 2, axis=1)
    res = np.empty((n, K))
    cdef double[:, ::1] out = res
    cdef Py_ssize_t t, i, a
    cdef double acc
    with nogil:
        for t in range(n):
            for i in range(K):
                acc = -half_sq[i]
                for a in range(d):
                    acc += xv[t, a] * uv[i, a]
                out[t, i] = acc
            _softmax(&out[t, 0], K)
    return res


def mixture_scores(x, centers):
    cdef const double[:, :] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :] uv = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], K = uv.shape[0], d = uv.shape[1]
    cdef double[:, ::1] pi = mixture_responsibilities(x, centers)
    res = np.empty((n, K * d))
    cdef double[:, ::1] out = res
    cdef Py_ssize_t t, i, a
    with nogil:
        for t in range(n):
            for i in range(K):
                for a in range(d):
                    out[t, i * d + a] = -pi[t, i] * (xv[t, a] - uv[i, a])
    return res


def fisher_moment(x, centers):
    cdef const double[:, :] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :] uv = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], K = uv.shape[0], d = uv.shape[1]
    cdef Py_ssize_t q = K * d
    cdef double[:] half_sq = 0.5 * np.sum(np.asarray(uv) ** 2, axis=1)
    F_arr = np.zeros((q, q))
    cdef double[:, ::1] F = F_arr
    cdef double* pi = <double*> malloc(K * sizeof(double))
    cdef double* s = <double*> malloc(q * sizeof(double))
    cdef Py_ssize_t t, i, a, b
    cdef double acc, sa
    try:
        with nogil:
            for t in range(n):
                for i in range(K):
                    acc = -half_sq[i]
                    for a in range(d):
                        acc += xv[t, a] * uv[i, a]
                    pi[i] = acc
                _softmax(pi, K)
                for i in range(K):
                    for a in range(d):
                        s[i * d + a] = -pi[i] * (xv[t, a] - uv[i, a])
                for a in range(q):
                    sa = s[a]
                    for b in range(a, q):
                        F[a, b] += sa * s[b]
    finally:
        free(pi)
        free(s)
    F_arr = np.triu(F_arr) + np.triu(F_arr, 1).T
    return F_arr / n


def pair_fourth_moment(x, y):
    cdef const double[:, :] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1]
    cdef Py_ssize_t q = d * d
    T_arr = np.zeros((q, q))
    cdef double[:, ::1] T = T_arr
    cdef double* v = <double*> malloc(q * sizeof(double))
    cdef Py_ssize_t t, a, b
    cdef double va
    try:
        with nogil:
            for t in range(n):
                for a in range(d):
                    for b in range(d):
                        v[a * d + b] = xv[t, a] * yv[t, b]
                for a in range(q):
                    va = v[a]
                    for b in range(a, q):
                        T[a, b] += va * v[b]
    finally:
        free(v)
    T_arr = np.triu(T_arr) + np.triu(T_arr, 1).T
    return T_arr / n
