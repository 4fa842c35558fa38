"""Numba switch.

Set ``UAD_DISABLE_NUMBA=1`` to force the pure-numpy kernels; the flag is read
once at import time. If numba is not importable the numpy path is used too.
"""
import os

_FLAG = os.environ.get("UAD_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG not in {"1", "true", "yes", "on"}

# fastmath stays off: tie detection and the calibration tests rely on exact IEEE behaviour.
NJIT_OPTIONS = dict(cache=True, nogil=True, fastmath=False, error_model="numpy")


def njit(fn):
    """Compile ``fn`` with numba when available, else return it untouched."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(**NJIT_OPTIONS)(fn)
