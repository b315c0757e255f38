"""Class-conditional Mahalanobis scoring and the open-set decision rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from snmnet import linalg
from snmnet.errors import (
    CalibrationError,
    ConfigError,
    ContractError,
    DegenerateSampleError,
    InvalidInputError,
    ShapeError,
)

METRICS = ("mahalanobis", "euclidean")
UNIT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class ClassStats:
    class_id: int
    mu: np.ndarray
    sigma_reg: np.ndarray
    chol: np.ndarray
    n_samples: int

    @classmethod
    def from_covariance(cls, class_id: int, mu, sigma_reg, n_samples: int) -> "ClassStats":
        sigma_reg = np.asarray(sigma_reg, dtype=np.float64)
        return cls(int(class_id), np.asarray(mu, dtype=np.float64), sigma_reg,
                   linalg.cholesky(sigma_reg), int(n_samples))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def fit_stats(features, labels, lam: float = linalg.DEFAULT_LAMBDA,
              require_unit_norm: bool = True) -> list[ClassStats]:
    """Mean, regularised covariance and Cholesky factor for every class in ``labels``.

    Args:
        features: (n, d) feature rows; must lie on the unit sphere unless
            ``require_unit_norm`` is off (ablations without L2 projection).
        labels: (n,) integer class ids.
        lam: ridge added to each covariance diagonal.

    Returns:
        One :class:`ClassStats` per distinct label, sorted by class id.
    """
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if F.ndim != 2 or y.shape != (F.shape[0],):
        raise ShapeError(f"features {F.shape} and labels {y.shape} do not line up")
    if require_unit_norm:
        off = np.abs(np.linalg.norm(F, axis=1) - 1.0) > UNIT_NORM_TOL
        if off.any():
            raise ContractError(f"{int(off.sum())} feature rows are not unit norm")
    stats = []
    for c in np.unique(y):
        Fc = F[y == c]
        if len(Fc) < 2:
            raise DegenerateSampleError(f"class {int(c)} has {len(Fc)} sample(s); need at least 2")
        mu = Fc.mean(axis=0)
        sigma = linalg.regularize(linalg.sample_covariance(Fc, mu), lam)
        stats.append(ClassStats.from_covariance(int(c), mu, sigma, len(Fc)))
    return stats


def mahalanobis(f, stats: ClassStats) -> float:
    """``sqrt((f - mu)^T Sigma^-1 (f - mu))`` via the cached Cholesky factor."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (stats.dim,):
        raise ShapeError(f"feature has shape {f.shape}, class stats are {stats.dim}-dimensional")
    y = linalg.solve_lower(stats.chol, f - stats.mu)
    return float(np.sqrt(y @ y))


def class_distances(F, all_stats: list[ClassStats], metric: str = "mahalanobis") -> np.ndarray:
    """(n, K) distances from each row of ``F`` to each class, columns in ``all_stats`` order."""
    if metric not in METRICS:
        raise ConfigError(f"score metric must be one of {METRICS}, got {metric!r}")
    if not all_stats:
        raise ConfigError("no class statistics to score against")
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    out = np.empty((F.shape[0], len(all_stats)))
    for k, st in enumerate(all_stats):
        if F.shape[1] != st.dim:
            raise ShapeError(f"features are {F.shape[1]}-dimensional, class {st.class_id} is {st.dim}")
        if metric == "mahalanobis":
            out[:, k] = linalg.mahalanobis_rows(st.chol, st.mu, F)
        else:
            out[:, k] = linalg.row_norms(F - st.mu)
    return out


def rejection_score(f, all_stats: list[ClassStats], metric: str = "mahalanobis"):
    """Distance to the nearest class and that class's id.

    Accepts one feature vector (returns scalars) or a batch of rows (returns
    arrays). Ties go to the lowest class id.
    """
    single = np.ndim(f) == 1
    ordered = sorted(all_stats, key=lambda s: s.class_id)
    D = class_distances(f, ordered, metric)
    idx = np.argmin(D, axis=1)  # first minimum == lowest class id
    s = D[np.arange(D.shape[0]), idx]
    ids = np.array([st.class_id for st in ordered])[idx]
    if single:
        return float(s[0]), int(ids[0])
    return s, ids


def calibrate_threshold(known_scores, percentile: float = 95.0) -> float:
    """Linear-interpolation percentile: order statistic at rank ``p/100 * (n-1)``."""
    scores = np.asarray(known_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise CalibrationError("cannot calibrate a threshold from zero scores")
    if not 0 < percentile < 100:
        raise CalibrationError(f"percentile must be in (0, 100), got {percentile}")
    if not np.all(np.isfinite(scores)):
        raise CalibrationError("non-finite calibration scores")
    return float(np.percentile(scores, percentile, method="linear"))


@dataclass(frozen=True)
class OpenSetDecision:
    score: float
    predicted: int
    known: bool
    threshold: float

    @property
    def verdict(self) -> str:
        return "known" if self.known else "unknown"

    @property
    def label(self) -> int | None:
        """Predicted class when accepted, ``None`` when rejected."""
        return self.predicted if self.known else None


def decide(s: float, y_hat: int, tau: float) -> OpenSetDecision:
    """Accept ``y_hat`` iff ``s < tau``; ``s >= tau`` rejects. ``tau = inf`` never rejects."""
    if np.isnan(tau) or tau == -np.inf:
        raise InvalidInputError(f"threshold must be a number or +inf, got {tau}")
    return OpenSetDecision(float(s), int(y_hat), bool(s < tau), float(tau))


def decide_batch(scores, preds, tau: float) -> list[OpenSetDecision]:
    return [decide(s, y, tau) for s, y in zip(scores, preds)]
