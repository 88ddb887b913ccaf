"""Optional numba acceleration.

Kernels are written once as plain Python loops and compiled with ``njit``
when numba is importable and ``CRYSFORGE_JIT`` is not ``0``.  Every kernel
also has a vectorized numpy twin in :mod:`crysforge.kernels`; the public
dispatchers pick one based on :data:`JIT_ENABLED`.
"""

from __future__ import annotations

import os

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

JIT_ENABLED = _HAVE_NUMBA and os.environ.get("CRYSFORGE_JIT", "1").strip() not in ("0", "false", "no")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if _HAVE_NUMBA:
        return numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def set_threads(n: int) -> None:
    if _HAVE_NUMBA:
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
