"""Backend selection for the hot loops.

The Cython extension is used when it was built; otherwise the numpy
fallback is imported. Set ``RGBTMAE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"

if os.environ.get("RGBTMAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

raw_cmss_rows = _impl.raw_cmss_rows
greedy_match = _impl.greedy_match
w1_sorted = _impl.w1_sorted

__all__ = ["BACKEND", "raw_cmss_rows", "greedy_match", "w1_sorted"]
