# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled sliding-window kernels.

Accumulation order matches ``_pykernels`` tap for tap, so both backends
produce bit-identical results when built without FMA contraction.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _plane(const double[:, ::1] src, const double[:, ::1] kernel,
                 double[:, ::1] dst) noexcept nogil:
    cdef Py_ssize_t k = kernel.shape[0]
    cdef Py_ssize_t height = dst.shape[0]
    cdef Py_ssize_t width = dst.shape[1]
    cdef Py_ssize_t y, x, i, j
    cdef double acc
    for y in range(height):
        for x in range(width):
            acc = 0.0
            for i in range(k):
                for j in range(k):
                    acc = acc + kernel[i, j] * src[y + k - 1 - i, x + k - 1 - j]
            dst[y, x] = acc


def convolve_padded(padded, kernel):
    """True 2-D convolution of a pre-padded (H+k-1, W+k-1, C) array."""
    cdef double[:, ::1] kern = np.ascontiguousarray(kernel, dtype=np.float64)
    planes = np.ascontiguousarray(np.moveaxis(np.asarray(padded, dtype=np.float64), -1, 0))
    cdef Py_ssize_t k = kern.shape[0]
    cdef Py_ssize_t channels = planes.shape[0]
    cdef Py_ssize_t height = planes.shape[1] - k + 1
    cdef Py_ssize_t width = planes.shape[2] - k + 1
    out = np.empty((channels, height, width), dtype=np.float64)
    cdef double[:, :, ::1] src = planes
    cdef double[:, :, ::1] dst = out
    cdef Py_ssize_t c
    with nogil:
        for c in range(channels):
            _plane(src[c], kern, dst[c])
    return np.ascontiguousarray(np.moveaxis(out, 0, -1))
