# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im with the same layout and summation order as the numpy fallback."""

import numpy as np
cimport cython

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1, wo = (wp - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, ho, wo, c, kh, kw), dtype=dtype)
    cdef floating[:, :, :, :, :, ::1] o = out
    cdef Py_ssize_t b, y, x, ch, i, j, y0, x0
    with nogil:
        for b in range(n):
            for y in range(ho):
                y0 = y * stride
                for x in range(wo):
                    x0 = x * stride
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                o[b, y, x, ch, i, j] = xp[b, ch, y0 + i, x0 + j]
    return out


def col2im(floating[:, :, :, :, :, ::1] cols, int hp, int wp, int stride):
    cdef Py_ssize_t n = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t c = cols.shape[3], kh = cols.shape[4], kw = cols.shape[5]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t b, y, x, ch, i, j
    # kernel offsets outermost: each destination pixel sums its taps in (i, j) order
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(ho):
                            for x in range(wo):
                                o[b, ch, y * stride + i, x * stride + j] += cols[b, y, x, ch, i, j]
    return out
