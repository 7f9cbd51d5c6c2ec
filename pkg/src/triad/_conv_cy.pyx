# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution patch kernels.

Single-pass gather/scatter over the patch layout used by the conv layer.
``col2im`` accumulates in kernel row-major order, matching the NumPy
fallback bit for bit.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] xp, int k, int stride):
    cdef Py_ssize_t b = xp.shape[0]
    cdef Py_ssize_t c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2]
    cdef Py_ssize_t wp = xp.shape[3]
    cdef Py_ssize_t oh = (hp - k) // stride + 1
    cdef Py_ssize_t ow = (wp - k) // stride + 1
    out_arr = np.empty((b, c * k * k, oh * ow))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, kh, kw, y, x, row
    for bi in range(b):
        for ci in range(c):
            for kh in range(k):
                for kw in range(k):
                    row = (ci * k + kh) * k + kw
                    for y in range(oh):
                        for x in range(ow):
                            out[bi, row, y * ow + x] = \
                                xp[bi, ci, y * stride + kh, x * stride + kw]
    return out_arr


def col2im(double[:, :, ::1] cols, int c, int k, int stride,
           int hp, int wp):
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t oh = (hp - k) // stride + 1
    cdef Py_ssize_t ow = (wp - k) // stride + 1
    out_arr = np.zeros((b, c, hp, wp))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, kh, kw, y, x, row
    for bi in range(b):
        for ci in range(c):
            for kh in range(k):
                for kw in range(k):
                    row = (ci * k + kh) * k + kw
                    for y in range(oh):
                        for x in range(ow):
                            out[bi, ci, y * stride + kh, x * stride + kw] += \
                                cols[bi, row, y * ow + x]
    return out_arr
