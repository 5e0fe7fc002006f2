"""numba shim.

Hot kernels are written twice: a loop version compiled with :func:`njit`
and a vectorised numpy version. ``MCRE_NUMBA=0`` in the environment forces
the numpy path; so does a missing numba install.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def njit(func):
    if not HAVE_NUMBA:  # pragma: no cover
        return None
    return numba.njit(cache=True, nogil=True)(func)


def numba_enabled():
    flag = os.environ.get("MCRE_NUMBA", "1").strip().lower()
    return HAVE_NUMBA and flag not in ("0", "false", "no", "off")


def backend_name():
    return "numba" if numba_enabled() else "numpy"
