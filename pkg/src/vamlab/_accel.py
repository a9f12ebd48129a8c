"""JIT switch for the hot kernels.

Numba is used when it is importable and ``VAMLAB_NUMBA`` is not set to a
false-ish value (``0``, ``false``, ``no``, ``off``).  The flag is read once at
import time; set it before importing :mod:`vamlab`.
"""

import os

_FALSY = {"0", "false", "no", "off"}


def _numba_requested() -> bool:
    return os.environ.get("VAMLAB_NUMBA", "1").strip().lower() not in _FALSY


try:  # pragma: no cover - depends on the environment
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

NUMBA_AVAILABLE = _numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _numba_requested()


def njit(func):
    """Compile ``func`` with numba (cached, nopython) if available."""
    if _numba is None:
        return func
    return _numba.njit(cache=True, nogil=True)(func)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
