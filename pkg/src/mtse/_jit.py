"""Backend selection for the hot kernels.

Set ``MTSE_DISABLE_JIT=1`` to run the pure-numpy kernels instead of the
numba-compiled ones. The choice is made once, at import time.
"""
import os

_FLAG = os.environ.get("MTSE_DISABLE_JIT", "").strip().lower()
DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    _numba = None

HAVE_NUMBA = _numba is not None
USE_JIT = HAVE_NUMBA and not DISABLED


def njit(fn):
    """Compile ``fn`` with numba when available, otherwise return it as is.

    Always compiled without fastmath so reductions keep their index order.
    """
    if not HAVE_NUMBA:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


def backend_name():
    return "numba" if USE_JIT else "numpy"
