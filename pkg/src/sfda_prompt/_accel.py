"""Numba toggle.

Set ``SFDA_PROMPT_DISABLE_NUMBA=1`` before import to force the pure-numpy
kernels. The flag is read once; ``set_backend`` switches at runtime (used by
tests and the benchmark).
"""
import os

_truthy = {"1", "true", "yes", "on"}

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("SFDA_PROMPT_DISABLE_NUMBA", "").lower() not in _truthy


def njit(*args, **kwargs):
    """``numba.njit`` with caching on; identity decorator when numba is absent."""
    if not HAS_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    import numba

    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous name."""
    global USE_NUMBA
    previous = backend()
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba is not installed")
        USE_NUMBA = True
    elif name == "numpy":
        USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def backend():
    return "numba" if USE_NUMBA else "numpy"
