# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense kernels: covariance, Cholesky, forward substitution."""

import numpy as np
from libc.math cimport sqrt


def covariance(const double[:, ::1] X, const double[::1] mu):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double di, scale = 1.0 / (n - 1)
    row_arr = np.empty(d, dtype=np.float64)
    cdef double[::1] row = row_arr
    out = np.zeros((d, d), dtype=np.float64)
    cdef double[:, ::1] S = out
    # stream the rows once, accumulating the upper triangle with a contiguous inner loop
    for k in range(n):
        for i in range(d):
            row[i] = X[k, i] - mu[i]
        for i in range(d):
            di = row[i]
            for j in range(i, d):
                S[i, j] += di * row[j]
    for i in range(d):
        for j in range(i, d):
            S[i, j] *= scale
            S[j, i] = S[i, j]
    return out


def cholesky(const double[:, ::1] A):
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s, ljj
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] L = out
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return out, j, s
        ljj = sqrt(s)
        L[j, j] = ljj
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / ljj
    return out, -1, 0.0


def solve_lower(const double[:, ::1] L, const double[::1] b):
    cdef Py_ssize_t n = L.shape[0]
    cdef Py_ssize_t i, k
    cdef double s
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    return out


def solve_lower_rows(const double[:, ::1] L, const double[:, ::1] B):
    cdef Py_ssize_t m = B.shape[0], n = B.shape[1]
    cdef Py_ssize_t r, i, k
    cdef double s
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] Y = out
    for r in range(m):
        for i in range(n):
            s = B[r, i]
            for k in range(i):
                s -= L[i, k] * Y[r, k]
            Y[r, i] = s / L[i, i]
    return out


def row_norms(const double[:, ::1] D):
    cdef Py_ssize_t m = D.shape[0], n = D.shape[1]
    cdef Py_ssize_t r, i
    cdef double acc
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    for r in range(m):
        acc = 0.0
        for i in range(n):
            acc += D[r, i] * D[r, i]
        o[r] = sqrt(acc)
    return out


def mahalanobis_rows(const double[:, ::1] L, const double[::1] mu, const double[:, ::1] F):
    """Distances ``||L^-1 (f - mu)||`` for every row of ``F``; one scratch row, no temporaries."""
    cdef Py_ssize_t m = F.shape[0], n = F.shape[1]
    cdef Py_ssize_t r, i, k
    cdef double s, acc
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    scratch = np.empty(n, dtype=np.float64)
    cdef double[::1] y = scratch
    for r in range(m):
        acc = 0.0
        for i in range(n):
            s = F[r, i] - mu[i]
            for k in range(i):
                s -= L[i, k] * y[k]
            s = s / L[i, i]
            y[i] = s
            acc += s * s
        o[r] = sqrt(acc)
    return out
