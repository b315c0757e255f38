"""Dense real linear algebra for the scorer.

Covariance estimation, Cholesky factorisation and forward substitution, all in
float64. There is deliberately no general inverse: Mahalanobis distances are
always taken through a triangular solve.

The hot loops live in a compiled extension (``_ckernels``). When it is not
built, an equivalent numpy implementation is used instead; ``BACKEND`` names
the active one and :func:`use_backend` switches explicitly.
"""

from __future__ import annotations

import logging

import numpy as np

from snmnet.errors import (
    DegenerateSampleError,
    FactorizationError,
    InvalidInputError,
    ShapeError,
)
from snmnet.linalg import _pykernels

log = logging.getLogger(__name__)

try:
    from snmnet.linalg import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

_kernels = _BACKENDS.get("compiled", _pykernels)
BACKEND = "compiled" if _ckernels is not None else "python"

DEFAULT_LAMBDA = 1e-4

__all__ = [
    "BACKEND",
    "DEFAULT_LAMBDA",
    "available_backends",
    "cholesky",
    "mahalanobis_rows",
    "regularize",
    "row_norms",
    "sample_covariance",
    "solve_lower",
    "solve_lower_rows",
    "use_backend",
]


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def use_backend(name: str) -> None:
    """Select ``"compiled"`` or ``"python"`` kernels for this process."""
    global _kernels, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    _kernels = _BACKENDS[name]
    BACKEND = name
    log.debug("linalg backend set to %s", name)


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _as_vector(v, name: str) -> np.ndarray:
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return v


def sample_covariance(X, mu) -> np.ndarray:
    """Unbiased covariance ``sum (x_i - mu)(x_i - mu)^T / (n - 1)``.

    ``mu`` is taken as given rather than recomputed, so callers control the
    centre. The result is exactly symmetric.
    """
    X = _as_matrix(X, "X")
    mu = _as_vector(mu, "mu")
    if X.shape[0] < 2:
        raise DegenerateSampleError(f"need at least 2 samples for a covariance, got {X.shape[0]}")
    if mu.shape[0] != X.shape[1]:
        raise ShapeError(f"mu has length {mu.shape[0]} but X has {X.shape[1]} columns")
    return _kernels.covariance(X, mu)


def regularize(sigma, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Return ``sigma + lam * I``."""
    sigma = _as_matrix(sigma, "sigma")
    if sigma.shape[0] != sigma.shape[1]:
        raise ShapeError(f"sigma must be square, got {sigma.shape}")
    if not lam >= 0:
        raise InvalidInputError(f"lambda must be >= 0, got {lam}")
    out = sigma.copy()
    out[np.diag_indices_from(out)] += lam
    return out


def cholesky(A) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == A``.

    Raises:
        FactorizationError: a pivot was not strictly positive. The matrix is
            never patched here; regularize first.
    """
    A = _as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ShapeError(f"A must be square, got {A.shape}")
    L, pivot, value = _kernels.cholesky(A)
    if pivot >= 0:
        raise FactorizationError(int(pivot), float(value))
    return L


def _check_factor(L) -> np.ndarray:
    L = _as_matrix(L, "L")
    if L.shape[0] != L.shape[1]:
        raise ShapeError(f"L must be square, got {L.shape}")
    return L


def solve_lower(L, b) -> np.ndarray:
    """Forward substitution: ``y`` with ``L @ y == b``."""
    L = _check_factor(L)
    b = _as_vector(b, "b")
    if b.shape[0] != L.shape[0]:
        raise ShapeError(f"L is {L.shape[0]}x{L.shape[0]} but b has length {b.shape[0]}")
    return _kernels.solve_lower(L, b)


def solve_lower_rows(L, B) -> np.ndarray:
    """Row-wise forward substitution; row ``r`` of the result solves ``L y = B[r]``."""
    L = _check_factor(L)
    B = _as_matrix(B, "B")
    if B.shape[1] != L.shape[0]:
        raise ShapeError(f"L is {L.shape[0]}x{L.shape[0]} but B rows have length {B.shape[1]}")
    return _kernels.solve_lower_rows(L, B)


def row_norms(D) -> np.ndarray:
    return _kernels.row_norms(_as_matrix(D, "D"))


def mahalanobis_rows(L, mu, F) -> np.ndarray:
    """``||L^{-1}(f - mu)||_2`` for every row ``f`` of ``F``."""
    L = _check_factor(L)
    mu = _as_vector(mu, "mu")
    F = _as_matrix(F, "F")
    if F.shape[1] != L.shape[0] or mu.shape[0] != L.shape[0]:
        raise ShapeError(
            f"dimension mismatch: L {L.shape[0]}, mu {mu.shape[0]}, features {F.shape[1]}"
        )
    return _kernels.mahalanobis_rows(L, mu, F)
