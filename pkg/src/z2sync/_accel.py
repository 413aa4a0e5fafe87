"""Optional numba acceleration for the hot kernels.

Every kernel in :mod:`z2sync._kernels` has a numba implementation and a plain
numpy implementation.  The numba one is used when numba imports cleanly and
``Z2SYNC_DISABLE_NUMBA`` is unset (or ``0``).  ``NUMBA_DISABLE_JIT`` is also
honoured, since numba itself then runs the decorated functions as Python.
"""

import logging
import os

_TRUTHY = ("1", "true", "yes", "on")

DISABLE_NUMBA = os.environ.get("Z2SYNC_DISABLE_NUMBA", "0").strip().lower() in _TRUTHY

try:
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and not DISABLE_NUMBA


def njit(func=None, **options):
    """``numba.njit`` when numba is available, identity otherwise."""
    opts = {"cache": True, "nogil": True}
    opts.update(options)

    def wrap(f):
        if numba is None:
            return f
        return numba.njit(**opts)(f)

    if func is not None:
        return wrap(func)
    return wrap


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
