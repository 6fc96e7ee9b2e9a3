"""1x1-kernel convolutions as channel matmuls (BLAS)."""

import numpy as np


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    xs = x[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo) x (O, C) -> (N, O, Ho, Wo)
    return np.einsum("nchw,oc->nohw", xs, w[:, :, 0, 0], optimize=True)


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, stride: int):
    xs = x[:, :, ::stride, ::stride]
    w2 = w[:, :, 0, 0]
    grad_w = np.einsum("nohw,nchw->oc", grad_out, xs, optimize=True)[:, :, None, None]
    grad_xs = np.einsum("nohw,oc->nchw", grad_out, w2, optimize=True)
    grad_x = np.zeros_like(x)
    grad_x[:, :, ::stride, ::stride] = grad_xs
    return grad_x, grad_w
