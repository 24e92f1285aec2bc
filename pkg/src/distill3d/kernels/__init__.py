"""Hot loops with two interchangeable implementations.

Every kernel here exists as a numba ``@njit`` loop and as a vectorised numpy
path.  ``DISTILL3D_KERNELS=numpy`` (or ``use_backend("numpy")``) selects the
numpy path; the default is numba when it imports.  Both paths produce the
same results up to float summation order.
"""

from __future__ import annotations

import contextlib
import os

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the dev environment
    HAVE_NUMBA = False

_override: str | None = None


def backend() -> str:
    """Currently selected kernel backend, ``"numba"`` or ``"numpy"``."""
    name = _override or os.environ.get("DISTILL3D_KERNELS", "numba")
    name = name.strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"DISTILL3D_KERNELS must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        return "numpy"
    return name


@contextlib.contextmanager
def use_backend(name: str):
    global _override
    prev = _override
    _override = name
    try:
        backend()
        yield
    finally:
        _override = prev


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when numba is present, identity otherwise."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
