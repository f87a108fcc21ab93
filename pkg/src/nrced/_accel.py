"""Backend selection for the hot kernels.

Numba is used when it is importable unless ``NRCED_NUMBA`` is set to one of
``0``, ``false``, ``no`` or ``off``.  Every jitted kernel has a pure-numpy
twin in :mod:`nrced.kernels`, so the package works without numba.
"""

import os

_FALSE = {"0", "false", "no", "off"}

try:
    import numba as _numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is an optional extra
    _numba = None
    NUMBA_AVAILABLE = False


def numba_requested():
    return os.environ.get("NRCED_NUMBA", "1").strip().lower() not in _FALSE


USE_NUMBA = NUMBA_AVAILABLE and numba_requested()


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if _numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return _numba.njit(*args, **kwargs)
