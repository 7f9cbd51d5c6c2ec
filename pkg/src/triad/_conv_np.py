"""Pure-NumPy convolution patch kernels (fallback backend).

Accumulation order in ``col2im`` matches the compiled backend exactly
(kernel row-major, ascending), so both backends are bit-identical.
"""

from __future__ import annotations

import numpy as np


def im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Gather k x k patches of a padded B x C x Hp x Wp batch.

    Returns (B, C*k*k, OH*OW) with patch index (c*k + kh)*k + kw.
    """
    b, c, hp, wp = xp.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    cols = np.empty((b, c, k, k, oh, ow))
    for kh in range(k):
        hs = slice(kh, kh + stride * (oh - 1) + 1, stride)
        for kw in range(k):
            ws = slice(kw, kw + stride * (ow - 1) + 1, stride)
            cols[:, :, kh, kw] = xp[:, :, hs, ws]
    return cols.reshape(b, c * k * k, oh * ow)


def col2im(cols: np.ndarray, c: int, k: int, stride: int,
           hp: int, wp: int) -> np.ndarray:
    """Scatter-add patch columns back onto a B x C x Hp x Wp grid."""
    b = cols.shape[0]
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    blocks = cols.reshape(b, c, k, k, oh, ow)
    out = np.zeros((b, c, hp, wp))
    for kh in range(k):
        hs = slice(kh, kh + stride * (oh - 1) + 1, stride)
        for kw in range(k):
            ws = slice(kw, kw + stride * (ow - 1) + 1, stride)
            out[:, :, hs, ws] += blocks[:, :, kh, kw]
    return out
