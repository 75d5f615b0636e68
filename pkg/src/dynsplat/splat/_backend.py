"""Compositing kernel selection.

The compiled Cython kernel is preferred; the pure-Python reference is the
fallback and the ground truth (the two are bitwise-identical by contract).
Set DYNSPLAT_BACKEND=python to force the fallback, =cython to require the
compiled kernel.
"""
from __future__ import annotations

import os

from . import _compositing_py

_requested = os.environ.get("DYNSPLAT_BACKEND", "auto").lower()

if _requested == "python":
    kernel = _compositing_py
    BACKEND = "python"
else:
    try:
        from . import _compositing_cy as kernel  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        kernel = _compositing_py
        BACKEND = "python"


def active_backend() -> str:
    return BACKEND


def get_kernels():
    """Both kernels when available, keyed by name (for parity tests/benchmarks)."""
    out = {"python": _compositing_py}
    try:
        from . import _compositing_cy
        out["cython"] = _compositing_cy
    except ImportError:
        pass
    return out
