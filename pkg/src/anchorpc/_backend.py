"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` version and a pure-numpy
version. ``ANCHORPC_BACKEND=numpy`` forces the fallback; the default uses numba
when it imports cleanly.
"""

import os

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

_requested = os.environ.get("ANCHORPC_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"ANCHORPC_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numba" if (_requested == "numba" and HAS_NUMBA) else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f


def use_numba():
    return BACKEND == "numba"


def set_backend(name):
    """Switch backend at runtime (tests and benchmarks)."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(name)
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    BACKEND = name
