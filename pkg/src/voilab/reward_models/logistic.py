"""L2-regularized logistic learner with one score head per ad.

Stands in for the tree learner on static feature regimes: deterministic,
convex, and sufficient to induce greedy policies. Each ad gets its own
coefficient vector fit on the impressions where that ad was shown, so the
action conditions the score through a fully interacted head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.special import expit

from ..errors import LabelError
from ..feature_pipeline import RegimeMatrix
from .config import LearnerConfig

__all__ = ["OneHotDesign", "fit_l2_logistic", "LogisticRewardModel"]


def _stable_bce_and_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray,
                         l2: float) -> tuple[float, np.ndarray]:
    """Mean BCE-with-logits plus 0.5*l2*||w||^2 (intercept unpenalized)."""
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    # log(1 + exp(z)) - y z, computed without overflow
    loss = float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - y * z))
    loss += 0.5 * l2 * float(w @ w)
    r = (expit(z) - y) / len(y)
    grad = np.concatenate([X.T @ r + l2 * w, [r.sum()]])
    return loss, grad


def fit_l2_logistic(X: np.ndarray, y: np.ndarray, l2: float = 0.0,
                    max_iter: int = 500) -> tuple[np.ndarray, float]:
    """Fit coefficients and intercept by L-BFGS with an analytic gradient."""
    theta0 = np.zeros(X.shape[1] + 1)
    res = minimize(_stable_bce_and_grad, theta0, args=(X, y, l2),
                   method="L-BFGS-B", jac=True, options={"maxiter": max_iter})
    return res.x[:-1], float(res.x[-1])


@dataclass(frozen=True, eq=False)
class OneHotDesign:
    """Frozen design: standardized numerics plus one-hot expanded categorical codes."""

    numeric: list[str]
    categorical: list[str]
    vocab: dict[str, list[int]]     # column -> sorted training codes
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, frame: pd.DataFrame, feature_names: list[str],
            categorical: list[str]) -> "OneHotDesign":
        numeric = [c for c in feature_names if c not in categorical]
        X = frame[numeric].to_numpy(dtype=float)
        mean = X.mean(axis=0) if len(X) else np.zeros(len(numeric))
        scale = X.std(axis=0) if len(X) else np.ones(len(numeric))
        scale = np.where(scale < 1e-12, 1.0, scale)
        vocab = {c: sorted(int(v) for v in np.unique(frame[c].to_numpy()))
                 for c in categorical}
        return cls(numeric=numeric, categorical=list(categorical), vocab=vocab,
                   mean=mean, scale=scale)

    def transform(self, frame: pd.DataFrame) -> np.ndarray:
        parts = [(frame[self.numeric].to_numpy(dtype=float) - self.mean) / self.scale]
        for col in self.categorical:
            codes = frame[col].to_numpy()
            block = np.zeros((len(frame), len(self.vocab[col])))
            for k, val in enumerate(self.vocab[col]):
                block[:, k] = codes == val
            parts.append(block)
        return np.hstack(parts)

    def column_names(self) -> list[str]:
        names = list(self.numeric)
        for col in self.categorical:
            names += [f"{col}={v}" for v in self.vocab[col]]
        return names


@dataclass(eq=False)
class LogisticRewardModel:
    """Per-ad logistic heads over a shared design matrix."""

    regime: str
    config: LearnerConfig
    design: OneHotDesign
    heads: dict[int, tuple[np.ndarray, float]] = field(default_factory=dict)
    fallback_rate: float = 0.5
    notes: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, matrix: RegimeMatrix, config: LearnerConfig) -> "LogisticRewardModel":
        y_all = matrix.frame["click"].to_numpy()
        if not np.isin(y_all, (0, 1)).all():
            raise LabelError("labels must be in {0, 1}")
        design = OneHotDesign.fit(matrix.frame, matrix.feature_names, matrix.categorical)
        model = cls(regime=str(matrix.regime.value), config=config, design=design)
        model.fallback_rate = float(np.clip(y_all.mean(), 1e-6, 1.0 - 1e-6))
        X_all = design.transform(matrix.frame)
        ads = matrix.frame["ad_id"].to_numpy() if "ad_id" in matrix.frame else None
        if ads is None:
            raise ValueError("matrix frame must carry ad_id for per-ad heads")
        for a in np.unique(ads):
            sel = ads == a
            w, b = fit_l2_logistic(X_all[sel], y_all[sel].astype(float),
                                   l2=config.l2_penalty, max_iter=config.max_iter)
            model.heads[int(a)] = (w, b)
        return model

    def predict_for_ad(self, frame: pd.DataFrame, ad: int) -> np.ndarray:
        """Scores for candidate `ad` given features computed under that candidate."""
        if ad not in self.heads:
            return np.full(len(frame), self.fallback_rate)
        w, b = self.heads[ad]
        return expit(self.design.transform(frame) @ w + b)

    def predict_logged(self, frame: pd.DataFrame) -> np.ndarray:
        """Score each row with the head of the ad actually shown."""
        out = np.empty(len(frame))
        X = self.design.transform(frame)
        ads = frame["ad_id"].to_numpy()
        for a in np.unique(ads):
            sel = ads == a
            if int(a) in self.heads:
                w, b = self.heads[int(a)]
                out[sel] = expit(X[sel] @ w + b)
            else:
                out[sel] = self.fallback_rate
        return out
