"""Backend switch for the compiled kernels.

Set ``LRRNET_NUMBA=0`` before import to force the pure-numpy paths.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("LRRNET_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
