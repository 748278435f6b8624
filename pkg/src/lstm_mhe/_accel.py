"""Optional numba acceleration.

Set ``LSTM_MHE_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable.
"""

import os

_DISABLED = os.environ.get("LSTM_MHE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by LSTM_MHE_DISABLE_NUMBA")
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:
    _njit = None
    NUMBA_AVAILABLE = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a transparent decorator."""
    if NUMBA_AVAILABLE:
        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def deco(fn):
        return fn

    return deco


def backend() -> str:
    return "numba" if NUMBA_AVAILABLE else "numpy"
