"""Optional numba acceleration.

Set ``MMKGR_NO_NUMBA=1`` to force the pure-numpy fallbacks.
"""
import os

try:
    from numba import njit as _njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def numba_disabled():
    return os.environ.get("MMKGR_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not numba_disabled()


def optional_njit(*args, **kwargs):
    """Compile with numba when available; otherwise return the function unchanged."""
    def decorator(func):
        if HAVE_NUMBA:
            return _njit(*args, **kwargs)(func)
        return func
    return decorator
