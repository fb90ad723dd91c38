"""Numba toggle.

Set ``ESGRID_DISABLE_NUMBA=1`` to force the pure-numpy kernels.  Without numba
installed the fallback is used automatically.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("ESGRID_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _FLAG not in ("", "0", "false", "no")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def njit(fn):
    """``numba.njit(cache=True)`` when available, else a plain function."""
    if HAVE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn
