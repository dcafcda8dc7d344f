# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Same layout contract as numpy_backend.py: cols[b, c*kh*kw, L], row index
c*(kh*kw) + ky*kw + kx, column index oy*ow + ox, zero padding outside the
input, col2im the exact adjoint of im2col.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out_np = np.empty(
        (b, c * kh * kw, oh * ow), dtype=np.float32 if real is float else np.float64
    )
    cdef real[:, :, ::1] out = out_np
    cdef Py_ssize_t ib, ic, ky, kx, oy, ox, iy, ix, r
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        r = ic * kh * kw + ky * kw + kx
                        for oy in range(oh):
                            iy = oy * stride + ky - pad
                            for ox in range(ow):
                                ix = ox * stride + kx - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    out[ib, r, oy * ow + ox] = x[ib, ic, iy, ix]
                                else:
                                    out[ib, r, oy * ow + ox] = 0
    return out_np


def col2im(real[:, :, ::1] cols, int h, int w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t c = cols.shape[1] // (kh * kw)
    out_np = np.zeros(
        (b, c, h, w), dtype=np.float32 if real is float else np.float64
    )
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t ib, ic, ky, kx, oy, ox, iy, ix, r
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        r = ic * kh * kw + ky * kw + kx
                        for oy in range(oh):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * stride + kx - pad
                                if 0 <= ix < w:
                                    out[ib, ic, iy, ix] += cols[ib, r, oy * ow + ox]
    return out_np


def depthwise3x3_forward(real[:, :, :, ::1] x, real[:, :, ::1] w):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    out_np = np.zeros(
        (b, c, h, wd), dtype=np.float32 if real is float else np.float64
    )
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t ib, ic, ky, kx, y, xx, iy, ix
    cdef real wv
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for ky in range(3):
                    for kx in range(3):
                        wv = w[ic, ky, kx]
                        for y in range(h):
                            iy = y + ky - 1
                            if iy < 0 or iy >= h:
                                continue
                            for xx in range(wd):
                                ix = xx + kx - 1
                                if 0 <= ix < wd:
                                    out[ib, ic, y, xx] += wv * x[ib, ic, iy, ix]
    return out_np


def depthwise3x3_grad_input(real[:, :, :, ::1] gy, real[:, :, ::1] w):
    # correlation with the 180-degree-rotated kernel
    cdef Py_ssize_t b = gy.shape[0], c = gy.shape[1], h = gy.shape[2], wd = gy.shape[3]
    out_np = np.zeros(
        (b, c, h, wd), dtype=np.float32 if real is float else np.float64
    )
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t ib, ic, ky, kx, y, xx, iy, ix
    cdef real wv
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for ky in range(3):
                    for kx in range(3):
                        wv = w[ic, 2 - ky, 2 - kx]
                        for y in range(h):
                            iy = y + ky - 1
                            if iy < 0 or iy >= h:
                                continue
                            for xx in range(wd):
                                ix = xx + kx - 1
                                if 0 <= ix < wd:
                                    out[ib, ic, y, xx] += wv * gy[ib, ic, iy, ix]
    return out_np


def depthwise3x3_grad_weight(real[:, :, :, ::1] x, real[:, :, :, ::1] gy):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    out_np = np.zeros((c, 3, 3), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] gw = out_np
    cdef Py_ssize_t ib, ic, ky, kx, y, xx, iy, ix
    cdef real acc
    with nogil:
        for ic in range(c):
            for ky in range(3):
                for kx in range(3):
                    acc = 0
                    for ib in range(b):
                        for y in range(h):
                            iy = y + ky - 1
                            if iy < 0 or iy >= h:
                                continue
                            for xx in range(wd):
                                ix = xx + kx - 1
                                if 0 <= ix < wd:
                                    acc += gy[ib, ic, y, xx] * x[ib, ic, iy, ix]
                    gw[ic, ky, kx] = acc
    return out_np
