"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same layout contract and the same float64 summation order, so both backends
agree to the last bit on every input we test.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (n, c, ho, wo, k, k) -> (n, ho, wo, c, k, k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).astype(np.float64)
    return cols.reshape(n * ho * wo, c * k * k)


def col2im(cols: np.ndarray, n: int, c: int, h: int, w: int,
           k: int, stride: int, pad: int) -> np.ndarray:
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if cols.shape != (n * ho * wo, c * k * k):
        raise ValueError(
            f"col2im: columns of shape {cols.shape} do not match "
            f"image ({n}, {c}, {h}, {w}) with k={k}"
        )
    taps = cols.reshape(n, ho, wo, c, k, k).transpose(4, 5, 0, 3, 1, 2)
    acc = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    span_y = (ho - 1) * stride + 1
    span_x = (wo - 1) * stride + 1
    # descending taps reproduce the compiled kernel's row-major summation order
    for ki in reversed(range(k)):
        for kj in reversed(range(k)):
            acc[:, :, ki:ki + span_y:stride, kj:kj + span_x:stride] += taps[ki, kj]
    if pad:
        acc = acc[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(acc, dtype=np.float32)
