# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels (see numpy_backend for semantics)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "compiled"


def conv1d_forward(cnp.ndarray[double, ndim=2] x, cnp.ndarray[double, ndim=3] w):
    cdef Py_ssize_t length = x.shape[0]
    cdef Py_ssize_t taps = w.shape[0]
    cdef Py_ssize_t c_in = w.shape[1]
    cdef Py_ssize_t c_out = w.shape[2]
    cdef Py_ssize_t pad = (taps - 1) // 2
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((length, c_out), dtype=np.float64)
    cdef Py_ssize_t p, k, i, o, src
    cdef double acc, xv
    for p in range(length):
        for k in range(taps):
            src = p + k - pad
            if src < 0 or src >= length:
                continue
            for i in range(c_in):
                xv = x[src, i]
                if xv == 0.0:
                    continue
                for o in range(c_out):
                    out[p, o] += xv * w[k, i, o]
    return out


def conv1d_backward(cnp.ndarray[double, ndim=2] x,
                    cnp.ndarray[double, ndim=3] w,
                    cnp.ndarray[double, ndim=2] grad_out):
    cdef Py_ssize_t length = x.shape[0]
    cdef Py_ssize_t taps = w.shape[0]
    cdef Py_ssize_t c_in = w.shape[1]
    cdef Py_ssize_t c_out = w.shape[2]
    cdef Py_ssize_t pad = (taps - 1) // 2
    cdef cnp.ndarray[double, ndim=2] gx = np.zeros((length, c_in), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] gw = np.zeros((taps, c_in, c_out), dtype=np.float64)
    cdef Py_ssize_t p, k, i, o, src
    cdef double g
    for p in range(length):
        for k in range(taps):
            src = p + k - pad
            if src < 0 or src >= length:
                continue
            for o in range(c_out):
                g = grad_out[p, o]
                if g == 0.0:
                    continue
                for i in range(c_in):
                    gx[src, i] += g * w[k, i, o]
                    gw[k, i, o] += g * x[src, i]
    return gx, gw


def maxpool2_forward(cnp.ndarray[double, ndim=2] x, cnp.ndarray[cnp.uint8_t, ndim=1] mask):
    cdef Py_ssize_t length = x.shape[0]
    cdef Py_ssize_t channels = x.shape[1]
    cdef Py_ssize_t out_len = (length + 1) // 2
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((out_len, channels), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] arg = np.full((out_len, channels), -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out_mask = np.zeros(out_len, dtype=np.uint8)
    cdef Py_ssize_t j, c, r0, r1
    cdef bint v0, v1
    for j in range(out_len):
        r0 = 2 * j
        r1 = 2 * j + 1
        v0 = mask[r0] != 0
        v1 = r1 < length and mask[r1] != 0
        if not v0 and not v1:
            continue
        out_mask[j] = 1
        for c in range(channels):
            if v0 and (not v1 or x[r0, c] >= x[r1, c]):
                out[j, c] = x[r0, c]
                arg[j, c] = r0
            else:
                out[j, c] = x[r1, c]
                arg[j, c] = r1
    return out, arg, out_mask


def maxpool2_backward(cnp.ndarray[double, ndim=2] grad_out,
                      cnp.ndarray[cnp.int64_t, ndim=2] arg,
                      Py_ssize_t length):
    cdef Py_ssize_t out_len = grad_out.shape[0]
    cdef Py_ssize_t channels = grad_out.shape[1]
    cdef cnp.ndarray[double, ndim=2] gx = np.zeros((length, channels), dtype=np.float64)
    cdef Py_ssize_t j, c
    cdef cnp.int64_t r
    for j in range(out_len):
        for c in range(channels):
            r = arg[j, c]
            if r >= 0:
                gx[r, c] += grad_out[j, c]
    return gx
