"""Numba switch.

Kernels in :mod:`cersdx.kernels` come in two flavours: an explicit-loop
version compiled with ``numba.njit`` and a vectorised numpy version.  The
loop versions are used when numba imports and ``CERS_DISABLE_NUMBA`` is
unset (or ``0``).
"""

from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    flag = os.environ.get("CERS_DISABLE_NUMBA", "0").strip().lower()
    return HAVE_NUMBA and flag in ("", "0", "false", "no")


def njit(fn):
    """Compile ``fn`` lazily with numba when available; identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(cache=False, nogil=True)(fn)
    return fn
