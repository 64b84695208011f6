# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def multiquadric_matrix(const double[:, ::1] a, const double[:, ::1] b, double shape):
    cdef Py_ssize_t p = a.shape[0], n = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double r2, diff, c2 = shape * shape
    out = np.empty((p, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(p):
            for j in range(n):
                r2 = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    r2 += diff * diff
                o[i, j] = sqrt(r2 + c2)
    return out


def multiquadric_eval(const double[:, ::1] points, const double[:, ::1] centers,
                      const double[::1] weights, double shape):
    cdef Py_ssize_t p = points.shape[0], n = centers.shape[0], d = points.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double r2, diff, acc, c2 = shape * shape
    out = np.empty(p, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(p):
            acc = 0.0
            for j in range(n):
                r2 = 0.0
                for k in range(d):
                    diff = points[i, k] - centers[j, k]
                    r2 += diff * diff
                acc += weights[j] * sqrt(r2 + c2)
            o[i] = acc
    return out


def min_cross_distance(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t p = a.shape[0], n = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double r2, diff, best = INFINITY
    with nogil:
        for i in range(p):
            for j in range(n):
                r2 = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    r2 += diff * diff
                    if r2 >= best:
                        break
                if r2 < best:
                    best = r2
    return sqrt(best)
