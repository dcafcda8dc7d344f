"""Pure-numpy implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable; the
two backends must agree numerically (see tests/test_kernels.py).

Layout contract shared by both backends:
  im2col(x[b,c,H,W]) -> cols[b, c*kh*kw, L] with L = oh*ow, column l = oy*ow+ox,
  row r = c*(kh*kw) + ky*kw + kx (channel-major, window cells row-major).
  Out-of-bounds window cells read as 0. col2im is the exact adjoint
  (scatter-add of the same mapping), so fold(unfold(x)) counts window overlaps.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    oh = conv_out_extent(h, kh, stride, pad)
    ow = conv_out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # windows: [b, c, oh', ow', kh, kw], then stride-subsample the window grid
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(
    cols: np.ndarray, h: int, w: int, kh: int, kw: int, stride: int, pad: int
) -> np.ndarray:
    b = cols.shape[0]
    oh = conv_out_extent(h, kh, stride, pad)
    ow = conv_out_extent(w, kw, stride, pad)
    c = cols.shape[1] // (kh * kw)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(kh):
        ye = ky + stride * oh
        for kx in range(kw):
            xe = kx + stride * ow
            out[:, :, ky:ye:stride, kx:xe:stride] += cols[:, :, ky, kx]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def depthwise3x3_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """3x3 depthwise cross-correlation, stride 1, zero pad 1. w: [c, 3, 3]."""
    b, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for ky in range(3):
        for kx in range(3):
            out += w[None, :, ky, kx, None, None] * xp[:, :, ky : ky + h, kx : kx + wd]
    return out


def depthwise3x3_grad_input(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    # adjoint of depthwise3x3_forward w.r.t. x: correlation with the
    # 180-degree-rotated kernel
    return depthwise3x3_forward(gy, w[:, ::-1, ::-1])


def depthwise3x3_grad_weight(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    b, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gw = np.zeros((c, 3, 3), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            gw[:, ky, kx] = np.einsum(
                "bchw,bchw->c", gy, xp[:, :, ky : ky + h, kx : kx + wd]
            )
    return gw
