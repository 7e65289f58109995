"""Prediction quality metrics: log loss, AUC, and relative information gain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ..errors import EmptyInput

__all__ = [
    "PredictionMetrics",
    "bernoulli_entropy",
    "binary_log_loss",
    "auc_score",
    "relative_information_gain",
    "evaluate_predictions",
]


@dataclass(frozen=True)
class PredictionMetrics:
    log_loss: float  # nats per sample
    auc: float
    rig: float       # 1 - log_loss / entropy(label mean); negative when worse than baseline


def bernoulli_entropy(p: float) -> float:
    """Entropy in nats of a Bernoulli(p) variable; 0 at the degenerate ends."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-(p * np.log(p) + (1.0 - p) * np.log(1.0 - p)))


def _validated(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if p.size == 0:
        raise EmptyInput("no predictions")
    if p.shape != y.shape:
        raise ValueError("probs and labels must have the same length")
    if np.any((p <= 0.0) | (p >= 1.0)) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    return p, y


def binary_log_loss(probs, labels) -> float:
    p, y = _validated(probs, labels)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def auc_score(scores, labels) -> float:
    """Rank-statistic AUC with midrank tie correction."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if s.size == 0:
        raise EmptyInput("no scores")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)  # midranks handle ties
    rank_sum_pos = ranks[y == 1.0].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def relative_information_gain(model_log_loss: float, baseline_rate: float) -> float:
    """Proportional log-loss improvement over always predicting baseline_rate."""
    h = bernoulli_entropy(baseline_rate)
    if h == 0.0:
        raise ValueError("baseline entropy is zero; RIG undefined")
    return 1.0 - model_log_loss / h


def evaluate_predictions(probs, labels) -> PredictionMetrics:
    ll = binary_log_loss(probs, labels)
    _, y = _validated(probs, labels)
    return PredictionMetrics(
        log_loss=ll,
        auc=auc_score(probs, labels),
        rig=relative_information_gain(ll, float(y.mean())),
    )
