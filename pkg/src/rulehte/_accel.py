"""Numba switch.

Hot kernels are compiled with numba when it is importable and the
``RULEHTE_DISABLE_NUMBA`` environment variable is unset (or "0").  Otherwise
the vectorised numpy implementations in :mod:`rulehte.kernels` are used.
The flag is read once, at import time.
"""
import os

_flag = os.environ.get("RULEHTE_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("numba disabled by RULEHTE_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def backend():
    return "numba" if HAVE_NUMBA else "numpy"
