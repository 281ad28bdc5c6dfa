# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: pairwise squared distances, Cholesky, solves."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def pairwise_sq_dists(a, b):
    """Squared Euclidean distances between rows of ``a`` and rows of ``b``."""
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    if av.shape[1] != bv.shape[1]:
        raise ValueError("row dimension mismatch")
    cdef Py_ssize_t na = av.shape[0], nb = bv.shape[0], d = av.shape[1]
    out = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    for i in range(na):
        for j in range(nb):
            acc = 0.0
            for k in range(d):
                diff = av[i, k] - bv[j, k]
                acc += diff * diff
            ov[i, j] = acc
    return out


def cholesky_lower(a):
    """Lower-triangular Cholesky factor of a symmetric PD matrix.

    Raises ArithmeticError when a pivot is not strictly positive.
    """
    arr = np.array(a, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] m = arr
    if m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    cdef Py_ssize_t n = m.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(n):
        s = m[j, j]
        for k in range(j):
            s -= m[j, k] * m[j, k]
        if s <= 0.0:
            raise ArithmeticError("matrix is not positive definite")
        m[j, j] = sqrt(s)
        for i in range(j + 1, n):
            s = m[i, j]
            for k in range(j):
                s -= m[i, k] * m[j, k]
            m[i, j] = s / m[j, j]
        for i in range(j):
            m[i, j] = 0.0
    return arr


def cho_solve(lower, b):
    """Solve A x = b given the lower Cholesky factor of A."""
    cdef double[:, ::1] lv = np.ascontiguousarray(lower, dtype=np.float64)
    barr = np.asarray(b, dtype=np.float64)
    squeeze = barr.ndim == 1
    x = np.array(barr.reshape(barr.shape[0], -1), dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] xv = x
    cdef Py_ssize_t n = lv.shape[0], m = xv.shape[1]
    if xv.shape[0] != n:
        raise ValueError("right-hand side length mismatch")
    cdef Py_ssize_t i, j, c
    cdef double s
    for c in range(m):
        # forward substitution: L z = b
        for i in range(n):
            s = xv[i, c]
            for j in range(i):
                s -= lv[i, j] * xv[j, c]
            xv[i, c] = s / lv[i, i]
        # back substitution: L^T x = z
        for i in range(n - 1, -1, -1):
            s = xv[i, c]
            for j in range(i + 1, n):
                s -= lv[j, i] * xv[j, c]
            xv[i, c] = s / lv[i, i]
    return x[:, 0] if squeeze else x
