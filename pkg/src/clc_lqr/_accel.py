"""Optional numba acceleration.

Set ``CLC_LQR_DISABLE_NUMBA=1`` (before import) to force the pure-numpy
kernels, e.g. for benchmarking or on platforms without numba.
"""
import os

_DISABLED = os.environ.get("CLC_LQR_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by CLC_LQR_DISABLE_NUMBA")
    from numba import njit  # noqa: F401

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrapper(func):
            return func

        return wrapper


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
