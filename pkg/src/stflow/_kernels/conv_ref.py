"""Pure-numpy conv2d kernels (im2col + BLAS matmul).

Fallback used when the compiled extension is unavailable. Same contracts
as ``_conv_cy``: float64, batched NCHW, cross-correlation (no kernel flip).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND_NAME = "numpy"


def _out_dims(H, W, kh, kw, padding, stride):
    Ho, rh = divmod(H + 2 * padding - kh, stride)
    Wo, rw = divmod(W + 2 * padding - kw, stride)
    if rh or rw or Ho < 0 or Wo < 0:
        raise ValueError(
            f"conv2d: non-integral output dims for input {H}x{W}, "
            f"kernel {kh}x{kw}, padding {padding}, stride {stride}"
        )
    return Ho + 1, Wo + 1


def _im2col(x, kh, kw, padding, stride):
    # (N,Ci,H,W) -> (N, Ci*kh*kw, Ho*Wo)
    N, Ci, H, W = x.shape
    Ho, Wo = _out_dims(H, W, kh, kw, padding, stride)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N,Ci,Ho,Wo,kh,kw) -> (N,Ci,kh,kw,Ho,Wo), contiguous copy for the GEMM
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(N, Ci * kh * kw, Ho * Wo), Ho, Wo


def conv2d_forward(x, w, padding, stride):
    N = x.shape[0]
    Co, Ci, kh, kw = w.shape
    cols, Ho, Wo = _im2col(x, kh, kw, padding, stride)
    out = np.matmul(w.reshape(Co, -1), cols)
    return out.reshape(N, Co, Ho, Wo)


def conv2d_grad_weight(gy, x, w_shape, padding, stride):
    Co, Ci, kh, kw = w_shape
    N = x.shape[0]
    cols, Ho, Wo = _im2col(x, kh, kw, padding, stride)
    gy2 = gy.reshape(N, Co, Ho * Wo)
    gw = np.matmul(gy2, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(Co, Ci, kh, kw)


def conv2d_grad_input(gy, w, x_shape, padding, stride):
    N, Ci, H, W = x_shape
    Co, _, kh, kw = w.shape
    Ho, Wo = _out_dims(H, W, kh, kw, padding, stride)
    gy2 = gy.reshape(N, Co, Ho * Wo)
    gcols = np.matmul(w.reshape(Co, -1).T, gy2)  # (N, Ci*kh*kw, Ho*Wo)
    gcols = gcols.reshape(N, Ci, kh, kw, Ho, Wo)
    Hp, Wp = H + 2 * padding, W + 2 * padding
    gxp = np.zeros((N, Ci, Hp, Wp))
    # col2im: one strided slice-add per kernel offset
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += gcols[
                :, :, i, j
            ]
    if padding:
        return gxp[:, :, padding:-padding, padding:-padding]
    return gxp
