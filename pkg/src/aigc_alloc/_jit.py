"""numba shim.

Set ``AIGC_ALLOC_NO_JIT=1`` to skip numba entirely; every kernel then runs its
vectorised numpy twin instead.  The flag is read once at import time.
"""

import os

_disabled = os.environ.get("AIGC_ALLOC_NO_JIT", "0").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    from numba import njit
    JIT_ENABLED = True
except ImportError:
    JIT_ENABLED = False

    def njit(func=None, **kwargs):
        if func is not None:
            return func

        def wrapper(f):
            return f

        return wrapper


def backend_name():
    return "numba" if JIT_ENABLED else "numpy"
