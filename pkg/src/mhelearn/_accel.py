"""Optional numba acceleration.

The hot numerical kernels live in :mod:`mhelearn.kf`. Each has a pure-numpy
twin so the package works without a JIT. Selection order:

* ``MHELEARN_NO_NUMBA=1`` in the environment forces the numpy path;
* otherwise numba is used when importable, numpy when not.
"""

from __future__ import annotations

import os


def numba_enabled() -> bool:
    """Return True when jitted kernels should be used."""
    if os.environ.get("MHELEARN_NO_NUMBA", "") == "1":
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def maybe_njit(**kwargs):
    """Return ``numba.njit(**kwargs)`` or a no-op decorator.

    The decision is taken at decoration time (module import); flipping the
    environment variable afterwards has no effect on already-imported modules.
    """
    if numba_enabled():
        from numba import njit

        return njit(**kwargs)

    def passthrough(func):
        return func

    return passthrough
