"""Optional numba acceleration.

Hot kernels (tree growing, nearest-neighbour search, per-trajectory
leverage corrections) come in two flavours: a numba ``@njit`` loop and a
pure-numpy version.  Set ``EXCURSIONLAB_DISABLE_NUMBA=1`` to force the
numpy path, e.g. when debugging or on platforms without numba.
"""

from __future__ import annotations

import os

_DISABLED = os.environ.get("EXCURSIONLAB_DISABLE_NUMBA", "").strip().lower() in {
    "1",
    "true",
    "yes",
    "on",
}

try:
    import numba as _numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def njit(func):
    """Compile ``func`` with numba when available, else return it unchanged.

    The undecorated function is kept on ``.py_func`` in both cases so the
    interpreted loop can still be reached for testing.
    """
    if not NUMBA_AVAILABLE:
        func.py_func = func
        return func
    return _numba.njit(cache=True, nogil=True)(func)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
