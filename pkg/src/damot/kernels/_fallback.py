"""Pure-numpy conv2d kernels (sliding-window views + einsum)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    kh, kw = w.shape[2], w.shape[3]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: (N, C, Ho, Wo, kh, kw)
    return np.einsum("nchwij,ocij->nohw", windows, w, optimize=True)


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, stride: int):
    n, c, h, width = x.shape
    o, _, kh, kw = w.shape
    ho, wo = grad_out.shape[2], grad_out.shape[3]

    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    grad_w = np.einsum("nohw,nchwij->ocij", grad_out, windows, optimize=True)

    grad_x = np.zeros_like(x)
    for ki in range(kh):
        for kj in range(kw):
            patch = np.einsum("nohw,oc->nchw", grad_out, w[:, :, ki, kj], optimize=True)
            grad_x[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += patch
    return grad_x, grad_w
