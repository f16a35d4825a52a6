# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels (im2col, col2im, direct convolution).

Layouts are N,C,H,W row-major. ``_fallback.py`` mirrors every function here
with identical signatures and results.
"""
import numpy as np
cimport numpy as cnp
cimport cython

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n_img, chans * kh * kw, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t n, c, u, v, oy, ox, iy, ix, row
    with nogil:
        for n in range(n_img):
            for c in range(chans):
                for u in range(kh):
                    for v in range(kw):
                        row = (c * kh + u) * kw + v
                        for oy in range(ho):
                            iy = oy * stride + u - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + v - pad
                                if ix < 0 or ix >= w:
                                    continue
                                cols[n, row, oy * wo + ox] = x[n, c, iy, ix]
    return out


def col2im(floating[:, :, ::1] cols, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_img = shape[0], chans = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n_img, chans, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] x = out
    cdef Py_ssize_t n, c, u, v, oy, ox, iy, ix, row
    with nogil:
        for n in range(n_img):
            for c in range(chans):
                for u in range(kh):
                    for v in range(kw):
                        row = (c * kh + u) * kw + v
                        for oy in range(ho):
                            iy = oy * stride + u - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + v - pad
                                if ix < 0 or ix >= w:
                                    continue
                                x[n, c, iy, ix] += cols[n, row, oy * wo + ox]
    return out


def conv2d_direct(floating[:, :, :, ::1] x, floating[:, :, :, ::1] weight, int stride, int pad):
    cdef Py_ssize_t n_img = x.shape[0], cin = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t cout = weight.shape[0], kh = weight.shape[2], kw = weight.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n_img, cout, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] y = out
    cdef Py_ssize_t n, o, c, u, v, oy, ox, iy, ix
    cdef double acc
    with nogil:
        for n in range(n_img):
            for o in range(cout):
                for oy in range(ho):
                    for ox in range(wo):
                        acc = 0.0
                        for c in range(cin):
                            for u in range(kh):
                                iy = oy * stride + u - pad
                                if iy < 0 or iy >= h:
                                    continue
                                for v in range(kw):
                                    ix = ox * stride + v - pad
                                    if ix < 0 or ix >= w:
                                        continue
                                    acc = acc + weight[o, c, u, v] * x[n, c, iy, ix]
                        y[n, o, oy, ox] = <floating>acc
    return out
