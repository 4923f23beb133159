"""Pure-numpy fallback for the compiled convolution kernels.

Same ``(C, H, W, B)`` layout and signatures as ``_kernels.pyx``. Uses an
im2col gather followed by a single matrix product per call.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _im2col(xp, kh, kw, stride):
    # (cin, ho, wo, b, kh, kw) -> (cin*kh*kw, ho*wo*b)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cin, ho, wo, nb = win.shape[:4]
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(cin * kh * kw, ho * wo * nb)
    return cols, ho, wo


def conv2d_forward(x, w, stride, pad):
    cout, cin, kh, kw = w.shape
    cols, ho, wo = _im2col(_pad(x, pad), kh, kw, stride)
    y = w.reshape(cout, -1).astype(x.dtype, copy=False) @ cols
    return y.reshape(cout, ho, wo, x.shape[3])


def conv2d_backward_input(gy, w, h, wdt, stride, pad):
    cout, cin, kh, kw = w.shape
    _, ho, wo, nb = gy.shape
    cols = w.reshape(cout, -1).T.astype(gy.dtype, copy=False) @ gy.reshape(cout, -1)
    cols = cols.reshape(cin, kh, kw, ho, wo, nb)
    gxp = np.zeros((cin, h + 2 * pad, wdt + 2 * pad, nb), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + wdt])


def conv2d_backward_weight(x, gy, kh, kw, stride, pad):
    cout = gy.shape[0]
    cols, _, _ = _im2col(_pad(x, pad), kh, kw, stride)
    gw = gy.reshape(cout, -1) @ cols.T
    return gw.reshape(cout, x.shape[0], kh, kw)
