"""Numba switch for the hot kernels.

Set ``FHRTWIN_DISABLE_NUMBA=1`` to run every kernel as plain Python/numpy.
The batched kernels also ship a vectorised numpy twin (``*_np``) that is
used when numba is off, so the fallback path stays usable.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_REQUESTED = os.environ.get("FHRTWIN_DISABLE_NUMBA", "").strip().lower() not in (
    "1",
    "true",
    "yes",
)
USE_NUMBA = NUMBA_REQUESTED and numba is not None


def njit(fn):
    """Compile ``fn`` with numba when enabled; return it untouched otherwise.

    The original Python function stays reachable as ``.py_func`` in both
    modes so tests can compare the two paths.
    """
    if USE_NUMBA:
        return numba.njit(cache=True, fastmath=False)(fn)
    fn.py_func = fn
    return fn


def jit_always(fn):
    """Compile with numba whenever it is importable (used by parity tests)."""
    if numba is None:  # pragma: no cover
        fn.py_func = fn
        return fn
    return numba.njit(cache=True)(fn)
