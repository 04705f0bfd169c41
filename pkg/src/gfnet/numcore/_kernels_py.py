"""Pure-numpy im2col / col2im, used when the compiled extension is absent.

Column layout is ``(N, Ho, Wo, C, kh, kw)`` so that a single 2-D GEMM with the
flattened kernel computes a whole convolution.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """``xp`` is the already zero-padded input of shape (N, C, Hp, Wp)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im(cols, hp, wp, stride):
    """Scatter-add columns back onto a padded (N, C, Hp, Wp) canvas."""
    n, ho, wo, c, kh, kw = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    src = cols.transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += src[:, :, i, j]
    return out
