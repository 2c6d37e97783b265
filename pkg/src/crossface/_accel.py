"""Numba acceleration switch.

Hot kernels in :mod:`crossface.kernels` exist in two variants: a loop
implementation compiled with ``numba.njit`` and a vectorized pure-numpy
fallback.  The active variant is chosen once at import time:

* ``CROSSFACE_NO_NUMBA=1`` in the environment forces the numpy path;
* otherwise numba is used when it imports cleanly.

``python -m crossface.bench`` times both paths side by side.
"""

import os

_FLAG = os.environ.get("CROSSFACE_NO_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _FLAG not in ("1", "true", "yes")

try:
    from numba import njit  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        """Stand-in decorator when numba is unavailable."""
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


USE_NUMBA = NUMBA_REQUESTED and HAVE_NUMBA
