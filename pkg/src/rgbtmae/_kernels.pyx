# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Semantics must match ``_fallback`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def raw_cmss_rows(const double[:, ::1] a, const double[:, ::1] b, double eps):
    cdef Py_ssize_t n = a.shape[0], d = a.shape[1], i, j
    cdef double ma, mb, va, vb, na, nb, dot, x, y, cos
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        ma = 0.0
        mb = 0.0
        for j in range(d):
            ma += a[i, j]
            mb += b[i, j]
        ma /= d
        mb /= d
        va = 0.0
        vb = 0.0
        na = 0.0
        nb = 0.0
        dot = 0.0
        for j in range(d):
            x = a[i, j]
            y = b[i, j]
            va += (x - ma) * (x - ma)
            vb += (y - mb) * (y - mb)
            na += x * x
            nb += y * y
            dot += x * y
        va /= d
        vb /= d
        cos = dot / ((sqrt(na) + eps) * (sqrt(nb) + eps))
        o[i] = (1.0 + cos) / (2.0 * va * vb + eps)
    return out


def greedy_match(const double[::1] values, const double[::1] points,
                 const long long[::1] order):
    """Each point (visited in ``order``) claims the nearest unclaimed value."""
    cdef Py_ssize_t n = values.shape[0], v = order.shape[0], t, i, best
    cdef double x, dist, best_dist
    used_arr = np.zeros(n, dtype=np.uint8)
    claimed = np.empty(v, dtype=np.int64)
    cdef unsigned char[::1] used = used_arr
    cdef long long[::1] c = claimed
    for t in range(v):
        x = points[order[t]]
        best = -1
        best_dist = 0.0
        for i in range(n):
            if used[i]:
                continue
            dist = fabs(values[i] - x)
            if best < 0 or dist < best_dist:
                best = i
                best_dist = dist
        used[best] = 1
        c[t] = best
    return claimed


def w1_sorted(const double[::1] u, const double[::1] v):
    """Exact W1 between two empirical measures given sorted samples."""
    cdef Py_ssize_t n = u.shape[0], m = v.shape[0], i = 0, j = 0
    cdef long long cur = 0, a, b, nxt
    cdef double acc = 0.0
    while i < n and j < m:
        a = (i + 1) * m
        b = (j + 1) * n
        nxt = a if a < b else b
        acc += (nxt - cur) * fabs(u[i] - v[j])
        cur = nxt
        if a == nxt:
            i += 1
        if b == nxt:
            j += 1
    return acc / (<double>n * <double>m)
