"""Logging-policy propensity estimation with cross-fitting and balance checks.

Builds the per-impression ad eligibility matrix from targeting filters,
estimates serving probabilities by K-fold cross-fitted one-vs-all logistic
regression, forces the estimates onto the eligibility support, and reports
standardized-bias covariate balance before and after inverse-propensity
weighting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np
import pandas as pd

from .errors import DataInconsistency, WeightingError
from .market_sim import AdSpec
from .reward_models.logistic import fit_l2_logistic
from .rng import substream

__all__ = [
    "EligibilityMatrix",
    "PropensityMatrix",
    "BalanceReport",
    "build_eligibility",
    "cross_fit_propensities",
    "enforce_support",
    "balance_report",
]

BALANCE_THRESHOLD = 0.2
_TARGETING_DIMS = ("region", "hour", "app")


@dataclass(frozen=True, eq=False)
class EligibilityMatrix:
    """Row-aligned boolean ad eligibility with bookkeeping on dropped rows."""

    matrix: np.ndarray          # (N, A) bool
    impression_id: np.ndarray   # (N,) rows kept, in log order
    provenance: tuple[str, ...]
    dropped_missing: int = 0
    dropped_inconsistent: int = 0

    @property
    def n_ads(self) -> int:
        return self.matrix.shape[1]


@dataclass(eq=False)
class PropensityMatrix:
    """Estimated serving probabilities on the eligibility support."""

    probs: np.ndarray           # (N, A); exactly 0 off-support, rows sum to 1
    eligibility: EligibilityMatrix
    raw: np.ndarray | None = None
    uniform_fallback_rows: int = 0
    single_class_fallbacks: int = 0
    notes: list[str] = field(default_factory=list)

    def shown_propensity(self, shown: np.ndarray) -> np.ndarray:
        return self.probs[np.arange(len(shown)), shown]

    def to_csv(self, path: str) -> None:
        frame = pd.DataFrame(
            {"impression_id": self.eligibility.impression_id}
            | {f"pi_{a}": self.probs[:, a] for a in range(self.probs.shape[1])})
        frame.to_csv(path, index=False, float_format="%.17g")


@dataclass(eq=False)
class BalanceReport:
    """Worst-over-ads standardized bias per covariate, pre and post weighting."""

    pre: dict[str, float]
    post: dict[str, float]
    worst_ad_pre: dict[str, int]
    worst_ad_post: dict[str, int]
    skipped: list[str] = field(default_factory=list)
    threshold: float = BALANCE_THRESHOLD

    def worst_pre(self) -> float:
        return max(self.pre.values()) if self.pre else 0.0

    def worst_post(self) -> float:
        return max(self.post.values()) if self.post else 0.0

    def balanced(self) -> bool:
        return all(v < self.threshold for v in self.post.values())

    def to_json(self, path: str) -> None:
        payload = {
            "threshold": self.threshold,
            "skipped": self.skipped,
            "covariates": {
                name: {"pre": self.pre[name], "post": self.post[name],
                       "worst_ad_pre": self.worst_ad_pre[name],
                       "worst_ad_post": self.worst_ad_post[name]}
                for name in self.pre},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def build_eligibility(rows: pd.DataFrame, ads: list[AdSpec],
                      strict: bool = False) -> EligibilityMatrix:
    """Intersect each ad's targeting filters against the logged impressions.

    An absent filter on a dimension means always eligible on that dimension.
    Rows with missing targeting variables are dropped and counted. A row
    whose shown ad comes out ineligible contradicts the log; with
    strict=True that raises DataInconsistency, otherwise the row is dropped
    and counted.
    """
    needed = ["region_id", "hour", "app_id"]
    present = rows[needed].notna().all(axis=1).to_numpy()
    kept = rows[present]
    n, A = len(kept), len(ads)
    region = kept["region_id"].to_numpy()
    hour = kept["hour"].to_numpy()
    app = kept["app_id"].to_numpy()
    matrix = np.ones((n, A), dtype=bool)
    for a, ad in enumerate(ads):
        col = np.ones(n, dtype=bool)
        if ad.allowed_regions is not None:
            col &= np.isin(region, list(ad.allowed_regions))
        if ad.allowed_hours is not None:
            col &= np.isin(hour, list(ad.allowed_hours))
        if ad.allowed_apps is not None:
            col &= np.isin(app, list(ad.allowed_apps))
        matrix[:, a] = col
    shown = kept["ad_id"].to_numpy()
    consistent = matrix[np.arange(n), shown]
    if not consistent.all():
        bad = int((~consistent).sum())
        if strict:
            raise DataInconsistency(
                f"{bad} rows whose shown ad fails its own targeting filters")
        matrix = matrix[consistent]
        kept = kept[consistent]
    else:
        bad = 0
    return EligibilityMatrix(
        matrix=matrix,
        impression_id=kept["impression_id"].to_numpy(),
        provenance=_TARGETING_DIMS,
        dropped_missing=int((~present).sum()),
        dropped_inconsistent=bad,
    )


def _propensity_design(rows: pd.DataFrame, elig: np.ndarray) -> np.ndarray:
    """Covariates for the logging-policy model.

    Eligibility indicator columns, one-hot region/hour/app, and standardized
    latitude, longitude, and minute-of-day. Missing columns are skipped so
    synthetic frames with fewer fields still work.
    """
    parts = [elig.astype(float)]
    for col in ("region_id", "hour", "app_id"):
        if col in rows:
            codes = rows[col].to_numpy()
            values = np.unique(codes)
            block = np.zeros((len(rows), len(values)))
            for k, val in enumerate(values):
                block[:, k] = codes == val
            parts.append(block)
    numeric = []
    if "lat" in rows and "lon" in rows:
        numeric += [rows["lat"].to_numpy(dtype=float), rows["lon"].to_numpy(dtype=float)]
    if "hour" in rows and "minute" in rows:
        numeric.append(rows["hour"].to_numpy(dtype=float) * 60.0
                       + rows["minute"].to_numpy(dtype=float))
    for x in numeric:
        sd = x.std()
        parts.append(((x - x.mean()) / (sd if sd > 1e-12 else 1.0))[:, None])
    return np.hstack(parts)


def cross_fit_propensities(rows: pd.DataFrame, eligibility: EligibilityMatrix,
                           n_folds: int = 5, l2: float = 1e-4, seed: int = 0,
                           max_iter: int = 200) -> PropensityMatrix:
    """Estimate serving probabilities by K-fold cross-fitted one-vs-all logistic.

    Rows are dealt into folds in a label-stratified round-robin so no fold
    loses a class entirely; each row is scored only by models fit on the
    other folds. If a training complement still ends up single-class for
    some ad, that (ad, fold) falls back to the complement's empirical rate.
    """
    rows = rows.set_index("impression_id").loc[eligibility.impression_id].reset_index()
    N, A = eligibility.matrix.shape
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if N < n_folds:
        raise ValueError("need at least as many rows as folds")
    shown = rows["ad_id"].to_numpy()
    X = _propensity_design(rows, eligibility.matrix)

    rng = substream(seed, "propensity-folds")
    fold = np.empty(N, dtype=int)
    dealt = []
    for a in np.unique(shown):
        members = np.flatnonzero(shown == a)
        dealt.append(rng.permutation(members))
    order = np.concatenate(dealt)
    fold[order] = np.arange(N) % n_folds

    raw = np.empty((N, A))
    fallbacks = 0
    for a in range(A):
        label = (shown == a).astype(float)
        for k in range(n_folds):
            train = fold != k
            test = fold == k
            if label[train].min() == label[train].max():
                raw[test, a] = label[train].mean()
                fallbacks += 1
                continue
            w, b = fit_l2_logistic(X[train], label[train], l2=l2, max_iter=max_iter)
            z = X[test] @ w + b
            raw[test, a] = 1.0 / (1.0 + np.exp(-z))
    out = enforce_support(raw, eligibility)
    out.single_class_fallbacks = fallbacks
    if fallbacks:
        out.notes.append(f"{fallbacks} (ad, fold) fits fell back to empirical rates")
    return out


def enforce_support(raw: np.ndarray, eligibility: EligibilityMatrix) -> PropensityMatrix:
    """Project raw scores onto the eligibility support.

    Ineligible entries become exactly zero; eligible entries are floored at
    a tiny positive value (so support stays positive even if a raw score
    was zero) and each row is renormalized over its eligible set. A row
    whose eligible scores are all zero gets the uniform distribution over
    its eligible ads.
    """
    raw = np.asarray(raw, dtype=float)
    if (raw < 0).any():
        raise ValueError("raw scores must be nonnegative")
    E = eligibility.matrix
    dead = np.where(E, raw, 0.0).sum(axis=1) <= 0.0
    probs = np.where(E, np.maximum(raw, 1e-12), 0.0)
    if dead.any():
        probs[dead] = np.where(E[dead], 1.0, 0.0)
    probs = probs / probs.sum(axis=1, keepdims=True)
    out = PropensityMatrix(probs=probs, eligibility=eligibility, raw=raw,
                           uniform_fallback_rows=int(dead.sum()))
    if dead.any():
        out.notes.append(f"{int(dead.sum())} rows renormalized from all-zero scores")
    return out


def balance_report(rows: pd.DataFrame, propensities: PropensityMatrix,
                   covariates: dict[str, np.ndarray] | list[str]) -> BalanceReport:
    """Standardized bias of each covariate across ads, before and after weighting.

    Pre-weighting compares each ad's unweighted treated mean against the
    full-population mean in population SD units. Post-weighting compares
    the inverse-propensity weighted treated mean against the mean of that
    ad's eligible subpopulation, in that subpopulation's SD units.
    Covariates with zero variance are skipped and reported.
    """
    rows = rows.set_index("impression_id").loc[
        propensities.eligibility.impression_id].reset_index()
    if isinstance(covariates, list):
        covariates = {c: rows[c].to_numpy(dtype=float) for c in covariates}
    N, A = propensities.probs.shape
    shown = rows["ad_id"].to_numpy()
    pi_shown = propensities.probs[np.arange(N), shown]
    if (pi_shown <= 0).any():
        raise WeightingError("zero estimated propensity for a shown ad")
    weights = 1.0 / pi_shown
    E = propensities.eligibility.matrix

    pre: dict[str, float] = {}
    post: dict[str, float] = {}
    worst_pre: dict[str, int] = {}
    worst_post: dict[str, int] = {}
    skipped: list[str] = []
    for name, x in covariates.items():
        x = np.asarray(x, dtype=float)
        sigma = x.std()
        if sigma < 1e-12:
            skipped.append(name)
            continue
        mean_all = x.mean()
        sb_pre = np.zeros(A)
        sb_post = np.zeros(A)
        for a in range(A):
            treated = shown == a
            if not treated.any():
                continue
            sb_pre[a] = abs(x[treated].mean() - mean_all) / sigma
            sel = E[:, a]
            sigma_elig = x[sel].std()
            w = weights[treated]
            weighted_mean = float(np.sum(w * x[treated]) / np.sum(w))
            if sigma_elig < 1e-12:
                sb_post[a] = 0.0 if abs(weighted_mean - x[sel].mean()) < 1e-9 else np.inf
                continue
            sb_post[a] = abs(weighted_mean - x[sel].mean()) / sigma_elig
        pre[name] = float(sb_pre.max())
        post[name] = float(sb_post.max())
        worst_pre[name] = int(sb_pre.argmax())
        worst_post[name] = int(sb_post.argmax())
    return BalanceReport(pre=pre, post=post, worst_ad_pre=worst_pre,
                         worst_ad_post=worst_post, skipped=skipped)
