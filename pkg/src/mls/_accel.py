"""Numba switch shared by every hot kernel.

Set ``MLS_NUMBA=0`` to force the pure-numpy paths. When numba is not
installed the numpy paths are used regardless of the flag.
"""
import os

try:
    import numba
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("MLS_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit(cache=True, nogil=True)`` or an identity decorator."""
    if not _HAVE_NUMBA:
        def wrap(fn):
            return fn
        return wrap(args[0]) if args and callable(args[0]) else wrap
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return numba.njit(*args, **kwargs)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
