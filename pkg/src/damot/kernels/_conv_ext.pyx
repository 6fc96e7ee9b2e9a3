# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv2d kernels.

Direct convolution with the kernel-tap weight hoisted out of the spatial
loops, so the innermost loops sweep whole output rows.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(cnp.ndarray[cnp.float64_t, ndim=4] x,
                   cnp.ndarray[cnp.float64_t, ndim=4] w,
                   int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (wd - kw) // stride + 1
    out_arr = np.zeros((n, o, ho, wo), dtype=np.float64)
    cdef cnp.float64_t[:, :, :, ::1] out = out_arr
    cdef cnp.float64_t[:, :, :, :] xv = x
    cdef cnp.float64_t[:, :, :, :] wv = w
    cdef Py_ssize_t b, oc, ic, i, j, ki, kj
    cdef double wsc
    for b in range(n):
        for oc in range(o):
            for ic in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        wsc = wv[oc, ic, ki, kj]
                        if wsc == 0.0:
                            continue
                        for i in range(ho):
                            for j in range(wo):
                                out[b, oc, i, j] += wsc * xv[b, ic, i * stride + ki,
                                                             j * stride + kj]
    return out_arr


def conv2d_backward(cnp.ndarray[cnp.float64_t, ndim=4] x,
                    cnp.ndarray[cnp.float64_t, ndim=4] w,
                    cnp.ndarray[cnp.float64_t, ndim=4] grad_out,
                    int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    gx_arr = np.zeros_like(np.asarray(x))
    gw_arr = np.zeros_like(np.asarray(w))
    cdef cnp.float64_t[:, :, :, ::1] gx = gx_arr
    cdef cnp.float64_t[:, :, :, ::1] gw = gw_arr
    cdef cnp.float64_t[:, :, :, :] xv = x
    cdef cnp.float64_t[:, :, :, :] wv = w
    cdef cnp.float64_t[:, :, :, :] gv = grad_out
    cdef Py_ssize_t b, oc, ic, i, j, ki, kj
    cdef double wsc, acc, g
    for b in range(n):
        for oc in range(o):
            for ic in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        wsc = wv[oc, ic, ki, kj]
                        acc = 0.0
                        for i in range(ho):
                            for j in range(wo):
                                g = gv[b, oc, i, j]
                                gx[b, ic, i * stride + ki, j * stride + kj] += g * wsc
                                acc += g * xv[b, ic, i * stride + ki, j * stride + kj]
                        gw[oc, ic, ki, kj] += acc
    return gx_arr, gw_arr
