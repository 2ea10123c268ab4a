"""Kernel compilation switch.

Hot loops are written once as plain Python over numpy arrays and compiled
with numba unless ``MARKEDWALK_NO_NUMBA`` is set to a truthy value before
import. Both paths run the same source, so results agree draw for draw.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

_flag = os.environ.get("MARKEDWALK_NO_NUMBA", "").strip().lower()
NUMBA_DISABLED = _flag not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and not NUMBA_DISABLED


def kernel(fn):
    """Compile ``fn`` in nopython mode, or return it untouched on the fallback path."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


def inline_kernel(fn):
    """Like ``kernel`` but inlined into compiled callers.

    Kernels receive namedtuples of arrays; an out-of-line call pays a
    reference-count round trip per array, which dominates small helpers.
    """
    if USE_NUMBA:
        return numba.njit(inline="always", cache=True, nogil=True)(fn)
    return fn


def new_logt_cache():
    """Per-chain cache mapping a part fingerprint to its log spanning-tree count."""
    if USE_NUMBA:
        from numba import types
        from numba.typed import Dict

        return Dict.empty(
            key_type=types.UniTuple(types.int64, 2), value_type=types.float64
        )
    return {}


@contextlib.contextmanager
def quiet_wraparound():
    # uint64 multiplies wrap by design; numpy scalars warn about it on the fallback path
    with np.errstate(over="ignore"):
        yield


def backend() -> str:
    return "numba" if USE_NUMBA else "python"
