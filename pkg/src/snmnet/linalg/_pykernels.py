"""Pure-Python (numpy-vectorised) fallback for the dense kernels.

Function signatures mirror ``_ckernels.pyx`` one to one; the dispatcher in
``snmnet.linalg`` picks whichever is importable.
"""

from __future__ import annotations

import math

import numpy as np


def covariance(X: np.ndarray, mu: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    D = X - mu
    S = (D.T @ D) / (n - 1)
    # a + b == b + a in IEEE arithmetic, so this is exactly symmetric
    return (S + S.T) * 0.5


def cholesky(A: np.ndarray) -> tuple[np.ndarray, int, float]:
    """Column-oriented Cholesky. Returns ``(L, failed_pivot, pivot_value)``; pivot -1 means success."""
    n = A.shape[0]
    L = np.zeros((n, n), dtype=np.float64)
    for j in range(n):
        row = L[j, :j]
        s = A[j, j] - row @ row
        if not s > 0.0:
            return L, j, float(s)
        ljj = math.sqrt(s)
        L[j, j] = ljj
        if j + 1 < n:
            L[j + 1 :, j] = (A[j + 1 :, j] - L[j + 1 :, :j] @ row) / ljj
    return L, -1, 0.0


def solve_lower(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = L.shape[0]
    y = np.empty(n, dtype=np.float64)
    for i in range(n):
        y[i] = (b[i] - L[i, :i] @ y[:i]) / L[i, i]
    return y


def solve_lower_rows(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``L y = b`` for every row ``b`` of ``B``."""
    m, n = B.shape
    Y = np.empty((m, n), dtype=np.float64)
    for i in range(n):
        Y[:, i] = (B[:, i] - Y[:, :i] @ L[i, :i]) / L[i, i]
    return Y


def row_norms(D: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", D, D))


def mahalanobis_rows(L: np.ndarray, mu: np.ndarray, F: np.ndarray) -> np.ndarray:
    return row_norms(solve_lower_rows(L, F - mu))
