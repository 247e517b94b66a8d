"""Backend selection for the convolution hot loops.

The compiled ``_kernels`` extension is used when it was built; otherwise the
numpy fallback is used. Setting ``CDIFF_PURE_PYTHON=1`` forces the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

BACKEND = "numpy"
_impl = _fallback

if os.environ.get("CDIFF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float32), k, stride, pad)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int],
           k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), n, c, h, w, k, stride, pad)
