"""Complement/substitute tests for geographic vs behavioral information.

The core quantity is the difference-in-differences of policy values across
the four information regimes,

    delta = (V_geo_behavior - V_behavior) - (V_geo - V_none),

estimated from per-impression IPS terms so that inference can cluster on
users: positive delta means geographic data is worth more when behavioral
data is already available (complements), negative means less (substitutes).
A cluster bootstrap supplies one-sided sign probabilities, and a quantile
split on impression depth (the impression's position in its user's history)
localizes where in the behavioral accumulation the interaction flips.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import AlignmentError, BinningError
from .feature_pipeline import Regime
from .rng import substream

__all__ = [
    "Decision",
    "SignificanceTier",
    "DeltaResult",
    "DepthBinResult",
    "aggregate_delta_test",
    "depth_binned_delta",
    "classify_interaction",
    "impression_depth",
    "depth_table_frame",
    "depth_levels_frame",
]

DEFAULT_BOOTSTRAP = 2000


class Decision(str, Enum):
    COMPLEMENT = "complement"
    SUBSTITUTE = "substitute"
    INCONCLUSIVE = "inconclusive"


class SignificanceTier(str, Enum):
    STRONG = "strong"
    MODERATE = "moderate"
    WEAK = "weak"
    NONE = "none"


@dataclass(frozen=True)
class DeltaResult:
    """Interaction estimate with clustered and bootstrap uncertainty."""

    delta_hat: float
    se_clustered: float
    t_stat: float
    p_two_sided: float
    p_delta_pos: float
    p_delta_neg: float
    se_bootstrap: float
    n: int
    n_clusters: int
    decision: Decision
    tier: SignificanceTier

    def ci95(self) -> tuple[float, float]:
        return (self.delta_hat - 1.96 * self.se_clustered,
                self.delta_hat + 1.96 * self.se_clustered)


@dataclass(frozen=True)
class DepthBinResult:
    """Delta test restricted to one depth bin, plus per-policy value levels."""

    bin_index: int
    depth_lo: int
    depth_hi: int
    result: DeltaResult
    levels: dict[str, float]  # regime value -> mean IPS term within the bin


def classify_interaction(delta_hat: float, p_two_sided: float,
                         p_delta_pos: float, p_delta_neg: float
                         ) -> tuple[Decision, SignificanceTier]:
    """Label the interaction sign and its evidence strength.

    The tier grades the smaller one-sided probability (the chance the sign
    is wrong); a graded NONE forces the decision to INCONCLUSIVE, as do a
    two-sided p above 0.5 or one-sided probabilities near a coin flip.
    """
    wrong_sign = min(p_delta_pos, p_delta_neg)
    if wrong_sign <= 0.01:
        tier = SignificanceTier.STRONG
    elif wrong_sign <= 0.05:
        tier = SignificanceTier.MODERATE
    elif wrong_sign <= 0.10:
        tier = SignificanceTier.WEAK
    else:
        tier = SignificanceTier.NONE
    undecidable = (p_two_sided >= 0.5 or 0.3 <= p_delta_pos <= 0.7
                   or tier is SignificanceTier.NONE)
    if undecidable or delta_hat == 0.0:
        return Decision.INCONCLUSIVE, tier
    return (Decision.COMPLEMENT if delta_hat > 0 else Decision.SUBSTITUTE), tier


def _check_alignment(terms: dict[Regime, pd.DataFrame]) -> None:
    regimes = (Regime.GEO_BEHAVIOR, Regime.BEHAVIOR, Regime.GEO, Regime.CONTEXT_ONLY)
    missing = [r for r in regimes if r not in terms]
    if missing:
        raise AlignmentError(f"missing term frames for {missing}")
    ref = terms[Regime.CONTEXT_ONLY]
    for r in regimes:
        frame = terms[r]
        if len(frame) != len(ref) or \
                not np.array_equal(frame["impression_id"].to_numpy(),
                                   ref["impression_id"].to_numpy()) or \
                not np.array_equal(frame["user_id"].to_numpy(),
                                   ref["user_id"].to_numpy()):
            raise AlignmentError(f"term frame for {r} misaligned with the others")


def _per_impression_delta(terms: dict[Regime, pd.DataFrame]) -> np.ndarray:
    z = {r: terms[r]["contribution"].to_numpy(dtype=float) for r in terms}
    return ((z[Regime.GEO_BEHAVIOR] - z[Regime.BEHAVIOR])
            - (z[Regime.GEO] - z[Regime.CONTEXT_ONLY]))


def aggregate_delta_test(terms: dict[Regime, pd.DataFrame],
                         cluster: str = "user_id",
                         n_boot: int = DEFAULT_BOOTSTRAP,
                         seed: int = 0) -> DeltaResult:
    """Difference-in-differences of regime values from aligned IPS terms.

    The four frames must cover identical impressions in identical order.
    The standard error clusters on `cluster`; the bootstrap resamples
    whole clusters with replacement and reports the fraction of resampled
    deltas on each side of zero.
    """
    _check_alignment(terms)
    delta_i = _per_impression_delta(terms)
    users = terms[Regime.CONTEXT_ONLY][cluster].to_numpy()
    n = len(delta_i)
    delta_hat = float(delta_i.mean())

    centered = pd.Series(delta_i - delta_hat)
    cluster_sums = centered.groupby(users).sum().to_numpy()
    se = float(np.sqrt(np.sum(cluster_sums ** 2))) / n
    if se > 0:
        t_stat = delta_hat / se
        p_two = float(2.0 * norm.sf(abs(t_stat)))
    else:
        t_stat = 0.0 if delta_hat == 0.0 else float(np.sign(delta_hat)) * np.inf
        p_two = 1.0 if delta_hat == 0.0 else 0.0

    raw_sums = pd.Series(delta_i).groupby(users).sum().to_numpy()
    counts = pd.Series(np.ones(n)).groupby(users).sum().to_numpy()
    G = len(raw_sums)
    rng = substream(seed, "delta-bootstrap")
    draws = rng.integers(0, G, size=(n_boot, G))
    boot = raw_sums[draws].sum(axis=1) / counts[draws].sum(axis=1)
    p_pos = float(np.mean(boot > 0) + 0.5 * np.mean(boot == 0))
    p_neg = 1.0 - p_pos
    se_boot = float(boot.std())

    decision, tier = classify_interaction(delta_hat, p_two, p_pos, p_neg)
    return DeltaResult(delta_hat=delta_hat, se_clustered=se, t_stat=t_stat,
                       p_two_sided=p_two, p_delta_pos=p_pos, p_delta_neg=p_neg,
                       se_bootstrap=se_boot, n=n, n_clusters=G,
                       decision=decision, tier=tier)


def impression_depth(rows: pd.DataFrame) -> np.ndarray:
    """1-based position of each impression in its user's time-ordered history."""
    order = np.lexsort((rows["timestamp_s"].to_numpy(), rows["user_id"].to_numpy()))
    users_sorted = rows["user_id"].to_numpy()[order]
    new_user = np.concatenate([[True], users_sorted[1:] != users_sorted[:-1]])
    starts = np.flatnonzero(new_user)
    pos = np.arange(len(rows)) - np.repeat(starts, np.diff(np.append(starts, len(rows))))
    depth = np.empty(len(rows), dtype=int)
    depth[order] = pos + 1
    return depth


def depth_binned_delta(terms: dict[Regime, pd.DataFrame], depth: np.ndarray,
                       n_bins: int = 10, cluster: str = "user_id",
                       n_boot: int = DEFAULT_BOOTSTRAP,
                       seed: int = 0) -> list[DepthBinResult]:
    """Run the interaction test inside equal-count bins of impression depth."""
    _check_alignment(terms)
    depth = np.asarray(depth)
    if len(depth) != len(terms[Regime.CONTEXT_ONLY]):
        raise AlignmentError("depth vector misaligned with the term frames")
    if n_bins > len(np.unique(depth)):
        raise BinningError(
            f"{n_bins} bins exceed the {len(np.unique(depth))} distinct depths")
    order = np.argsort(depth, kind="stable")
    results = []
    for k, chunk in enumerate(np.array_split(order, n_bins)):
        chunk = np.sort(chunk)  # keep original row order within the bin
        sub = {r: terms[r].iloc[chunk].reset_index(drop=True) for r in terms}
        res = aggregate_delta_test(sub, cluster=cluster, n_boot=n_boot,
                                   seed=seed + k)
        levels = {str(r.value): float(sub[r]["contribution"].mean()) for r in sub}
        results.append(DepthBinResult(
            bin_index=k,
            depth_lo=int(depth[chunk].min()),
            depth_hi=int(depth[chunk].max()),
            result=res,
            levels=levels,
        ))
    return results


def depth_table_frame(bins: list[DepthBinResult]) -> pd.DataFrame:
    """Tabulate per-bin test results, one row per depth bin."""
    rows = []
    for b in bins:
        lo, hi = b.result.ci95()
        rows.append({
            "bin": b.bin_index, "depth_lo": b.depth_lo, "depth_hi": b.depth_hi,
            "n": b.result.n, "delta_hat": b.result.delta_hat,
            "se": b.result.se_clustered, "ci_lo": lo, "ci_hi": hi,
            "t_stat": b.result.t_stat, "p_two_sided": b.result.p_two_sided,
            "p_delta_pos": b.result.p_delta_pos,
            "p_delta_neg": b.result.p_delta_neg,
            "decision": b.result.decision.value, "tier": b.result.tier.value,
        })
    return pd.DataFrame(rows)


def depth_levels_frame(bins: list[DepthBinResult]) -> pd.DataFrame:
    """Per-bin mean IPS value of each regime's policy (for level plots)."""
    rows = []
    for b in bins:
        row = {"bin": b.bin_index, "depth_lo": b.depth_lo, "depth_hi": b.depth_hi}
        row.update({f"value_{k}": v for k, v in b.levels.items()})
        rows.append(row)
    return pd.DataFrame(rows)
