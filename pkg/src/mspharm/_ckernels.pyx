# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather/scatter kernels behind conv3d and its adjoint."""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def vol2col(real[:, :, :, :, ::1] xp, int k, int stride, int xo, int yo, int zo):
    cdef Py_ssize_t n_batch = xp.shape[0], n_chan = xp.shape[1]
    cdef Py_ssize_t sy = xp.shape[3], sz = xp.shape[4]
    cdef Py_ssize_t row_step = stride * sy * sz, col_step = stride * sz
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n_chan * k * k * k, n_batch * xo * yo * zo), dtype=dtype)
    if out.size == 0:
        return out
    cdef real[:, ::1] cols = out
    cdef real *src
    cdef real *dst
    cdef real *plane
    cdef Py_ssize_t n, ox, oy, oz, c, kx, ky, kz, row
    with nogil:
        row = 0
        for c in range(n_chan):
            for kx in range(k):
                for ky in range(k):
                    for kz in range(k):
                        dst = &cols[row, 0]
                        for n in range(n_batch):
                            plane = &xp[n, c, kx, ky, kz]
                            for ox in range(xo):
                                src = plane + ox * row_step
                                for oy in range(yo):
                                    for oz in range(zo):
                                        dst[oz] = src[oz * stride]
                                    dst = dst + zo
                                    src = src + col_step
                        row = row + 1
    return out


def col2vol(real[:, ::1] cols, int n_batch, int n_chan, int xp_, int yp_, int zp_,
            int k, int stride, int xo, int yo, int zo):
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_batch, n_chan, xp_, yp_, zp_), dtype=dtype)
    if out.size == 0 or cols.shape[1] == 0:
        return out
    cdef real[:, :, :, :, ::1] vol = out
    cdef Py_ssize_t row_step = stride * yp_ * zp_, col_step = stride * zp_
    cdef real *src
    cdef real *dst
    cdef real *plane
    cdef Py_ssize_t n, ox, oy, oz, c, kx, ky, kz, row
    with nogil:
        row = 0
        for c in range(n_chan):
            for kx in range(k):
                for ky in range(k):
                    for kz in range(k):
                        src = &cols[row, 0]
                        for n in range(n_batch):
                            plane = &vol[n, c, kx, ky, kz]
                            for ox in range(xo):
                                dst = plane + ox * row_step
                                for oy in range(yo):
                                    for oz in range(zo):
                                        dst[oz * stride] += src[oz]
                                    src = src + zo
                                    dst = dst + col_step
                        row = row + 1
    return out
