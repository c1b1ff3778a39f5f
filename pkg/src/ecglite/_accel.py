"""JIT switch for the hot kernels.

Set ``ECGLITE_DISABLE_NUMBA=1`` (or numba's own ``NUMBA_DISABLE_JIT=1``) to
run the pure-numpy path. The flag is read once at import time.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}


def _flag(name):
    return os.environ.get(name, "").strip().lower() not in _FALSY


DISABLED = _flag("ECGLITE_DISABLE_NUMBA") or _flag("NUMBA_DISABLE_JIT")

try:
    if DISABLED:
        raise ImportError("numba disabled by environment")
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f

USE_NUMBA = HAS_NUMBA

JIT_OPTS = {"cache": True, "nogil": True}


def backend():
    return "numba" if USE_NUMBA else "numpy"
