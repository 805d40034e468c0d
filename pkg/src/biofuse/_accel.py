"""Numba switch.

Hot kernels are written once as plain Python/numpy loops and compiled with
``numba.njit`` when available. Setting ``BIOFUSE_DISABLE_NUMBA=1`` (or having
no numba installed) selects the pure-numpy implementations instead.
"""

import os
import warnings

_FLAG = "BIOFUSE_DISABLE_NUMBA"


class PerformanceWarning(UserWarning):
    pass


def _env_disabled():
    return os.environ.get(_FLAG, "").strip().lower() in ("1", "true", "yes", "on")


try:
    import numba as _numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency
    _numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _env_disabled()

if not HAS_NUMBA and not _env_disabled():  # pragma: no cover
    warnings.warn("numba is not available, falling back to numpy kernels", PerformanceWarning)


def njit(*args, **kwargs):
    """``numba.njit`` that returns the function untouched when numba is off.

    The undecorated function is always reachable as ``func.py_func`` so tests
    can compare both paths in one process.
    """
    def wrap(func):
        if HAS_NUMBA:
            jitted = _numba.njit(cache=True, **kwargs)(func)
            return jitted
        func.py_func = func
        return func

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return wrap(args[0])
    return wrap


def backend():
    return "numba" if USE_NUMBA else "numpy"
