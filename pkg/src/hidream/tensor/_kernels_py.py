"""Pure-numpy im2col/col2im for 3x3, stride-1, zero-padded convolution."""

import numpy as np

_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def im2col3x3(x):
    """(N, C, H, W) -> (N, C*9, H*W); column order is (c, ky, kx)."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, c, 9, h, w), dtype=x.dtype)
    for k, (dy, dx) in enumerate(_OFFSETS):
        cols[:, :, k] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, c * 9, h * w)


def col2im3x3(cols, h, w):
    """Adjoint of :func:`im2col3x3`: scatter-add columns back to (N, C, H, W)."""
    n, c9, _ = cols.shape
    c = c9 // 9
    cols = cols.reshape(n, c, 9, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for k, (dy, dx) in enumerate(_OFFSETS):
        xp[:, :, dy:dy + h, dx:dx + w] += cols[:, :, k]
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1])
