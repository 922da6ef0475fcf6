"""Numba switch.

Set ``EVKP_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. when numba
is unavailable or when comparing both paths.
"""
import os

_flag = os.environ.get("EVKP_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _flag not in ("1", "true", "yes", "on")


def njit(func):
    """Compile with numba when available, otherwise return ``func`` untouched."""
    if HAS_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func
