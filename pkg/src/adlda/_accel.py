"""Backend switch for the hot kernels.

Numba is used when importable unless ``ADLDA_DISABLE_NUMBA`` is set to a
truthy value. ``set_numba`` flips the choice at runtime (tests, benchmarks).
"""

from __future__ import annotations

import os
from contextlib import contextmanager

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_TRUTHY = {"1", "true", "yes", "on"}

_enabled = HAVE_NUMBA and os.environ.get("ADLDA_DISABLE_NUMBA", "").strip().lower() not in _TRUTHY


def numba_enabled() -> bool:
    return _enabled


def set_numba(flag: bool) -> None:
    global _enabled
    if flag and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _enabled = bool(flag)


@contextmanager
def backend(use_numba: bool):
    previous = _enabled
    set_numba(use_numba)
    try:
        yield
    finally:
        set_numba(previous)


def njit(fn):
    """``numba.njit(cache=True)`` when available, else the plain function."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)
