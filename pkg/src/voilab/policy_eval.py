"""Greedy policy induction and inverse-propensity-scored policy values.

A policy picks, per impression, the eligible ad with the highest predicted
click probability. Its value under the logged data is the mean of
1[logged ad = policy ad] / propensity * reward, with a cluster-robust
standard error over users, an effective sample size over the matched
weights, and lift against the logging policy's empirical CTR.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd

from .errors import EmptyEligibleSet, SupportViolation
from .feature_pipeline import Regime, TopKTables, build_regime_matrix
from .propensity import PropensityMatrix
from .reward_models import LogisticRewardModel, SequenceModel, build_sequence_dataset

__all__ = [
    "Policy",
    "PolicyValueEstimate",
    "induce_greedy_policy",
    "candidate_score_matrix",
    "ips_estimate",
    "effective_sample_size",
]


@dataclass(eq=False)
class Policy:
    """Deterministic ad-choice rule driven by a per-candidate score matrix."""

    regime: str
    name: str
    score_fn: Callable[[pd.DataFrame], np.ndarray]  # rows -> (N, A) scores

    @classmethod
    def from_scores(cls, scores: np.ndarray, regime: str = "scripted",
                    name: str = "scripted") -> "Policy":
        fixed = np.asarray(scores, dtype=float)
        return cls(regime=regime, name=name, score_fn=lambda rows: fixed)

    def decide(self, rows: pd.DataFrame, eligibility: np.ndarray,
               probs: np.ndarray) -> np.ndarray:
        """Argmax score over ads that are eligible with positive propensity.

        Ties go to the lowest ad id. A row with no viable candidate raises.
        """
        scores = np.asarray(self.score_fn(rows), dtype=float)
        viable = np.asarray(eligibility, dtype=bool) & (probs > 0)
        if not viable.any(axis=1).all():
            bad = int((~viable.any(axis=1)).sum())
            raise EmptyEligibleSet(f"{bad} rows have no eligible ad with support")
        masked = np.where(viable, scores, -np.inf)
        return masked.argmax(axis=1)


@dataclass(frozen=True)
class PolicyValueEstimate:
    """IPS value with cluster-robust uncertainty and audit counts."""

    policy: str
    value: float
    se: float
    ci95: tuple[float, float]
    t_stat: float
    lift_pct: float
    ess: float
    n: int
    n_clusters: int
    n_matched: int

    def to_dict(self) -> dict:
        return {
            "policy": self.policy, "value": self.value, "se": self.se,
            "ci95_lo": self.ci95[0], "ci95_hi": self.ci95[1],
            "t_stat": self.t_stat, "lift_pct": self.lift_pct, "ess": self.ess,
            "n": self.n, "n_clusters": self.n_clusters, "n_matched": self.n_matched,
        }


def candidate_score_matrix(learner, rows: pd.DataFrame, regime: Regime,
                           tables: TopKTables, n_ads: int) -> np.ndarray:
    """Predicted click probability of every ad at every impression.

    Behavioral features are recomputed under each candidate ad, so the
    counterfactual "what if ad a had been shown here" is scored on the
    features it would actually have produced.
    """
    N = len(rows)
    scores = np.zeros((N, n_ads))
    if isinstance(learner, SequenceModel):
        logged_mat = build_regime_matrix(rows, regime, tables)
        ds = build_sequence_dataset(logged_mat, learner.spec, learner.config.window)
        cands = {}
        for a in range(n_ads):
            mat_a = build_regime_matrix(rows, regime, tables, ad_override=a)
            cands[a] = build_sequence_dataset(mat_a, learner.spec,
                                              learner.config.window, ad_override=a)
        imp, flat, ad_ids = learner.score_candidates(ds, cands)
        lookup = pd.Series(np.arange(len(imp)), index=imp)
        order = lookup[rows["impression_id"].to_numpy()].to_numpy()
        return flat[order][:, [ad_ids.index(a) for a in range(n_ads)]]
    if isinstance(learner, LogisticRewardModel):
        for a in range(n_ads):
            mat_a = build_regime_matrix(rows, regime, tables, ad_override=a)
            scores[:, a] = learner.predict_for_ad(mat_a.frame, a)
        return scores
    raise TypeError(f"unsupported learner type {type(learner).__name__}")


def induce_greedy_policy(learner, regime: Regime, tables: TopKTables,
                         n_ads: int) -> Policy:
    """Wrap a fitted learner as the greedy (argmax click probability) policy."""

    def score_fn(rows: pd.DataFrame) -> np.ndarray:
        return candidate_score_matrix(learner, rows, regime, tables, n_ads)

    return Policy(regime=str(regime.value), name=f"greedy_{regime.value}",
                  score_fn=score_fn)


def effective_sample_size(weights: np.ndarray) -> float:
    """(sum w)^2 / sum w^2; zero when every weight is zero."""
    w = np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    denom = float(np.sum(w * w))
    if denom == 0.0:
        return 0.0
    return float(np.sum(w)) ** 2 / denom


def ips_estimate(rows: pd.DataFrame, policy: Policy | np.ndarray | None,
                 propensities: PropensityMatrix | np.ndarray,
                 v: np.ndarray | float = 1.0, cluster: str = "user_id",
                 eligibility: np.ndarray | None = None,
                 ) -> tuple[PolicyValueEstimate, pd.DataFrame]:
    """Inverse-propensity estimate of a policy's per-impression reward.

    `policy` may be a Policy, a precomputed action vector, or None, which
    scores the logging policy itself: every weight is exactly 1 so the
    estimate is bit-identical to the empirical mean of v * Y (a pipeline
    self-check). Returns the estimate and the per-impression audit frame
    with one weighted term per row.
    """
    if isinstance(propensities, PropensityMatrix):
        probs = propensities.probs
        E = propensities.eligibility.matrix
    else:
        probs = np.asarray(propensities, dtype=float)
        E = probs > 0 if eligibility is None else np.asarray(eligibility, dtype=bool)
    N, A = probs.shape
    shown = rows["ad_id"].to_numpy()
    y = rows["click"].to_numpy(dtype=float)
    v_arr = np.full(A, float(v)) if np.isscalar(v) else np.asarray(v, dtype=float)

    if policy is None:
        chosen = shown
        weights = np.ones(N)
        name = "logging"
    else:
        if isinstance(policy, Policy):
            chosen = policy.decide(rows, E, probs)
            name = policy.name
        else:
            chosen = np.asarray(policy, dtype=int)
            name = "actions"
        matched = shown == chosen
        pi_shown = probs[np.arange(N), shown]
        if (matched & (pi_shown <= 0)).any():
            raise SupportViolation("matched impression with zero propensity")
        weights = np.where(matched, np.divide(1.0, pi_shown,
                                              out=np.zeros(N), where=pi_shown > 0), 0.0)

    terms = weights * v_arr[shown] * y
    value = float(terms.mean())

    users = rows[cluster].to_numpy()
    centered = terms - value
    sums = pd.Series(centered).groupby(users).sum().to_numpy()
    variance = float(np.sum(sums ** 2)) / N ** 2
    se = float(np.sqrt(variance))
    baseline = float((v_arr[shown] * y).mean())
    lift = 100.0 * (value / baseline - 1.0) if baseline > 0 else float("nan")
    matched_weights = weights[weights > 0]
    estimate = PolicyValueEstimate(
        policy=name,
        value=value,
        se=se,
        ci95=(value - 1.96 * se, value + 1.96 * se),
        t_stat=value / se if se > 0 else float("inf"),
        lift_pct=lift,
        ess=effective_sample_size(matched_weights),
        n=N,
        n_clusters=len(sums),
        n_matched=int((weights > 0).sum()),
    )
    audit = pd.DataFrame({
        "impression_id": rows["impression_id"].to_numpy(),
        "user_id": users,
        "weight": weights,
        "contribution": terms,
    })
    return estimate, audit
