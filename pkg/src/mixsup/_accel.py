"""Numba switch.

Set ``MIXSUP_DISABLE_NUMBA=1`` to force the pure-numpy kernels (useful for
debugging, profiling and on platforms without a working llvmlite).
"""

import os

_FLAG = os.environ.get("MIXSUP_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _FLAG in ("1", "true", "yes", "on")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV

numba_default = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
}


def njit(fn):
    """Compile ``fn`` with the package defaults; identity when numba is missing."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(**numba_default)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
