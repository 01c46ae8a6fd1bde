"""Backend switch for the hot kernels.

Set ``TLTRADEOFF_NUMBA=0`` before import to force the pure-numpy path.
Numba is also skipped silently when it cannot be imported.
"""
import os

_flag = os.environ.get("TLTRADEOFF_NUMBA", "1").strip().lower()

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _flag not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` with numba when available, else return it untouched."""
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)


def backend():
    return "numba" if USE_NUMBA else "numpy"
