"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from rgbtmae import _fallback

try:
    from rgbtmae import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    a, b = rng.normal(size=(36, 128)), rng.normal(size=(36, 128))
    big_a, big_b = rng.normal(size=(196, 768)), rng.normal(size=(196, 768))
    vals = rng.random(36)
    pts = rng.random(4)
    order = rng.permutation(4).astype(np.int64)
    vals196, pts20 = rng.random(196), rng.random(20)
    order20 = rng.permutation(20).astype(np.int64)
    u, v = np.sort(rng.normal(size=30)), np.sort(rng.normal(size=6))
    return [
        ("raw_cmss_rows 36x128", "raw_cmss_rows", (a, b, 1e-6)),
        ("raw_cmss_rows 196x768", "raw_cmss_rows", (big_a, big_b, 1e-6)),
        ("greedy_match 36 -> 4", "greedy_match", (vals, pts, order)),
        ("greedy_match 196 -> 20", "greedy_match", (vals196, pts20, order20)),
        ("w1_sorted 30 vs 6", "w1_sorted", (u, v)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s}{'numpy us':>12s}{'cython us':>12s}{'speedup':>10s}")
    for label, name, call_args in cases(rng):
        t_py = timeit.timeit(lambda: getattr(_fallback, name)(*call_args), number=args.repeat)
        t_py = t_py / args.repeat * 1e6
        if _kernels is None:
            print(f"{label:28s}{t_py:12.2f}{'n/a':>12s}{'':>10s}")
            continue
        f = getattr(_kernels, name)
        t_c = timeit.timeit(lambda: f(*call_args), number=args.repeat) / args.repeat * 1e6
        r_py = np.asarray(getattr(_fallback, name)(*call_args))
        r_c = np.asarray(f(*call_args))
        assert np.allclose(r_py, r_c, rtol=1e-10, atol=1e-12), label
        print(f"{label:28s}{t_py:12.2f}{t_c:12.2f}{t_py / t_c:9.1f}x")


if __name__ == "__main__":
    main()
