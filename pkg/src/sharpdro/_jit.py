"""Optional numba acceleration.

Set ``SHARPDRO_DISABLE_NUMBA=1`` before import to force the pure-numpy
kernels. Results are deterministic within either path; the two paths agree
to floating-point rounding, not bitwise.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}

DISABLED_BY_ENV = os.environ.get("SHARPDRO_DISABLE_NUMBA", "").strip().lower() not in _FALSY

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USING_NUMBA = _numba is not None and not DISABLED_BY_ENV


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator.

    The decorated function is always importable; callers pick the compiled
    or numpy variant through :data:`USING_NUMBA`.
    """
    if _numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _numba.njit(*args, **kwargs)
