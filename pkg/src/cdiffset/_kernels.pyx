# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch-extraction kernels used by ``conv2d``.

Layout contract (shared with ``_fallback``):

* ``im2col`` maps a float32 ``(N, C, H, W)`` batch to a float64 matrix of
  shape ``(N * Ho * Wo, C * k * k)``; column order is ``(c, ki, kj)``.
* ``col2im`` is its adjoint: it scatters such a matrix back into a float32
  ``(N, C, H, W)`` batch, summing overlapping taps in float64 in row-major
  output order, i.e. descending ``(ki, kj)`` for any one input pixel.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const float[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    cdef Py_ssize_t kk = k * k
    out_arr = np.zeros((n * ho * wo, c * kk), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, ch, ki, kj, oy, ox, iy, ix, row, col
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    for ch in range(c):
                        for ki in range(k):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            col = ch * kk + ki * k
                            for kj in range(k):
                                ix = ox * stride + kj - pad
                                if ix < 0 or ix >= w:
                                    continue
                                out[row, col + kj] = x[b, ch, iy, ix]
    return out_arr


def col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t c,
           Py_ssize_t h, Py_ssize_t w, int k, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    cdef Py_ssize_t kk = k * k
    if cols.shape[0] != n * ho * wo or cols.shape[1] != c * kk:
        raise ValueError(
            f"col2im: columns of shape ({cols.shape[0]}, {cols.shape[1]}) do not match "
            f"image ({n}, {c}, {h}, {w}) with k={k}"
        )
    acc_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t b, ch, ki, kj, oy, ox, iy, ix, row, col
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    for ch in range(c):
                        for ki in range(k):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            col = ch * kk + ki * k
                            for kj in range(k):
                                ix = ox * stride + kj - pad
                                if ix < 0 or ix >= w:
                                    continue
                                acc[b, ch, iy, ix] += cols[row, col + kj]
    return acc_arr.astype(np.float32)
