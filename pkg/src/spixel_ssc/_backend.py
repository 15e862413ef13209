"""Kernel backend selection.

``SPIXEL_SSC_BACKEND`` picks the implementation of the hot superpixel loops:
``numba`` (default when importable) or ``numpy``. ``SPIXEL_SSC_THREADS`` caps
the number of threads numba may use.
"""
from __future__ import annotations

import os

try:
    import numba

    # the TBB layer is skipped (with a warning) on older TBB builds; prefer the
    # others unless the user picked a layer explicitly
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

_requested = os.environ.get("SPIXEL_SSC_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"SPIXEL_SSC_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numba" if (_requested == "numba" and NUMBA_AVAILABLE) else "numpy"

if NUMBA_AVAILABLE:
    _threads = os.environ.get("SPIXEL_SSC_THREADS")
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or an identity decorator without numba."""
    if not NUMBA_AVAILABLE:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


if NUMBA_AVAILABLE:
    prange = numba.prange
else:  # pragma: no cover
    prange = range
