"""Numba dispatch switch.

Set ``REFDET_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is read
once at import time; the benchmark script flips it per subprocess.
"""
import os

_FLAG = os.environ.get("REFDET_DISABLE_NUMBA", "0").strip().lower()

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """``numba.njit(cache=True)`` when enabled, otherwise the function unchanged."""
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


def backend():
    return "numba" if USE_NUMBA else "numpy"
