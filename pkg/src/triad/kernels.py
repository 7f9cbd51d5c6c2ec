"""Convolution patch kernels with backend selection at import.

The compiled Cython backend is used when available; otherwise a pure-NumPy
fallback with identical numerics.  Set ``TRIAD_KERNEL=python`` or
``TRIAD_KERNEL=cython`` to force a backend (the latter raises if the
extension was not built).
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["im2col", "col2im", "BACKEND"]

_choice = os.environ.get("TRIAD_KERNEL", "").strip().lower()
if _choice not in ("", "python", "cython"):
    raise ImportError(f"TRIAD_KERNEL must be 'python' or 'cython', "
                      f"got {_choice!r}")

if _choice == "python":
    from . import _conv_np as _impl
    BACKEND = "python"
else:
    try:
        from . import _conv_cy as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise
        from . import _conv_np as _impl  # type: ignore[no-redef]
        BACKEND = "python"


def im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Patch matrix (B, C*k*k, OH*OW) of a padded B x C x Hp x Wp batch."""
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    return _impl.im2col(xp, k, stride)


def col2im(cols: np.ndarray, c: int, k: int, stride: int,
           hp: int, wp: int) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add columns back to B x C x Hp x Wp."""
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    return _impl.col2im(cols, c, k, stride, hp, wp)
