"""Open-set metrics. Unknown is the positive class; higher score = more unknown."""

from __future__ import annotations

import numpy as np

from snmnet.errors import InvalidInputError, MetricUndefinedError


def _scores(values, side: str) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).ravel()
    if a.size == 0:
        raise MetricUndefinedError(f"no {side} scores")
    if np.any(np.isnan(a)):
        raise InvalidInputError(f"NaN in {side} scores")
    return a


def known_accuracy(predicted, truth, known_mask=None) -> float:
    """Closed-set accuracy of the argmin prediction over known-ground-truth samples.

    The reject verdict is ignored. ``known_mask`` defaults to every sample.
    """
    pred = np.asarray(predicted)
    true = np.asarray(truth)
    if pred.shape != true.shape:
        raise InvalidInputError(f"predictions {pred.shape} and labels {true.shape} differ in shape")
    mask = np.ones(true.shape, bool) if known_mask is None else np.asarray(known_mask, bool)
    if not mask.any():
        raise MetricUndefinedError("accuracy needs at least one known sample")
    return float(np.mean(pred[mask] == true[mask]))


def _average_ranks_x2(values: np.ndarray) -> np.ndarray:
    """Twice the 1-based mid-ranks (integers, so tie averaging stays exact)."""
    order = np.argsort(values, kind="stable")
    sorted_v = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], len(values)]  # exclusive
    # ranks start+1 .. end share the mean (start + 1 + end) / 2
    group_x2 = starts + 1 + ends
    ranks = np.empty(len(values), dtype=np.int64)
    ranks[order] = np.repeat(group_x2, ends - starts)
    return ranks


def auroc(known_scores, unknown_scores) -> float:
    """Mann-Whitney AUROC: P(unknown > known) + P(tie) / 2, via the rank sum."""
    k = _scores(known_scores, "known")
    u = _scores(unknown_scores, "unknown")
    ranks_x2 = _average_ranks_x2(np.concatenate([u, k]))
    n_u, n_k = len(u), len(k)
    u_stat_x2 = int(ranks_x2[:n_u].sum()) - n_u * (n_u + 1)
    return u_stat_x2 / (2 * n_u * n_k)


def tpr_at_fpr(known_scores, unknown_scores, fpr: float = 0.05) -> float:
    """Fraction of unknowns at or above the ``1 - fpr`` quantile of the known scores."""
    if not 0 < fpr < 1:
        raise InvalidInputError(f"fpr must be in (0, 1), got {fpr}")
    k = _scores(known_scores, "known")
    u = _scores(unknown_scores, "unknown")
    threshold = np.percentile(k, 100.0 * (1.0 - fpr), method="linear")
    return float(np.mean(u >= threshold))


def roc_curve(known_scores, unknown_scores):
    """(fpr, tpr) arrays from (0, 0) to (1, 1), one step per distinct score."""
    k = _scores(known_scores, "known")
    u = _scores(unknown_scores, "unknown")
    thresholds = np.unique(np.concatenate([k, u]))[::-1]
    k_sorted, u_sorted = np.sort(k), np.sort(u)
    fpr = (len(k) - np.searchsorted(k_sorted, thresholds, side="left")) / len(k)
    tpr = (len(u) - np.searchsorted(u_sorted, thresholds, side="left")) / len(u)
    return np.r_[0.0, fpr], np.r_[0.0, tpr]
