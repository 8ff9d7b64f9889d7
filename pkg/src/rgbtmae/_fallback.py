"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def raw_cmss_rows(a, b, eps):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    va = a.var(axis=1)
    vb = b.var(axis=1)
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    cos = (a * b).sum(axis=1) / ((na + eps) * (nb + eps))
    return (1.0 + cos) / (2.0 * va * vb + eps)


def greedy_match(values, points, order):
    values = np.asarray(values, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    free = np.ones(values.shape[0], dtype=bool)
    claimed = np.empty(len(order), dtype=np.int64)
    for t, k in enumerate(order):
        dist = np.where(free, np.abs(values - points[k]), np.inf)
        best = int(np.argmin(dist))
        free[best] = False
        claimed[t] = best
    return claimed


def w1_sorted(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n, m = u.shape[0], v.shape[0]
    # quantile breakpoints on the integer grid 1/(n*m)
    bps = np.union1d(np.arange(1, n + 1, dtype=np.int64) * m,
                     np.arange(1, m + 1, dtype=np.int64) * n)
    widths = np.diff(bps, prepend=0)
    i = (bps - 1) // m
    j = (bps - 1) // n
    return float(np.sum(widths * np.abs(u[i] - v[j])) / (n * m))
