# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im for 3x3, stride-1, zero-padded convolution.

Accumulation order in ``col2im3x3`` matches the numpy fallback exactly, so
both backends are bit-identical.
"""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] x, real[:, :, ::1] out):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ch, ky, kx, i, j, si, row, j0, j1, d
    cdef real* dst
    cdef real* src
    for b in range(n):
        for ch in range(c):
            for ky in range(3):
                for kx in range(3):
                    row = ch * 9 + ky * 3 + kx
                    d = kx - 1
                    j0 = 1 if kx == 0 else 0
                    j1 = w - 1 if kx == 2 else w
                    for i in range(h):
                        dst = &out[b, row, i * w]
                        si = i + ky - 1
                        if si < 0 or si >= h:
                            for j in range(w):
                                dst[j] = 0
                            continue
                        src = &x[b, ch, si, 0]
                        if j0:
                            dst[0] = 0
                        if j1 < w:
                            dst[w - 1] = 0
                        for j in range(j0, j1):
                            dst[j] = src[j + d]


def _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] out):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t b, ch, ky, kx, i, j, si, row, j0, j1, d
    cdef real* dst
    cdef real* src
    for b in range(n):
        for ch in range(c):
            for ky in range(3):
                for kx in range(3):
                    row = ch * 9 + ky * 3 + kx
                    d = kx - 1
                    j0 = 1 if kx == 0 else 0
                    j1 = w - 1 if kx == 2 else w
                    for i in range(h):
                        si = i + ky - 1
                        if si < 0 or si >= h:
                            continue
                        src = &cols[b, row, i * w]
                        dst = &out[b, ch, si, 0]
                        for j in range(j0, j1):
                            dst[j + d] += src[j]


def im2col3x3(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c * 9, h * w), dtype=x.dtype)
    _im2col(x, out)
    return out


def col2im3x3(cols, h, w):
    cols = np.ascontiguousarray(cols)
    n, c9, _ = cols.shape
    out = np.zeros((n, c9 // 9, h, w), dtype=cols.dtype)
    _col2im(cols, out)
    return out
