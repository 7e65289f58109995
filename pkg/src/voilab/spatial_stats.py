"""Residual spatial autocorrelation analysis of regional click rates.

Pipeline: aggregate impressions into regions, fit a Poisson rate model with
an exposure offset (optionally adding a behavioral prediction as a second,
fixed-coefficient offset), and test the log-rate residuals for spatial
structure with Moran's I and Geary's C under permutation inference.

Comparing the baseline residuals against behavior-adjusted residuals — and
doing so separately on each user's early (sparse-history) and late
(rich-history) impressions — separates spatial confounding, which a good
behavioral model absorbs once histories are long, from genuine location
effects, which persist in the adjusted residuals.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DegenerateGeometry,
    EmptyInput,
    InsufficientRegions,
    ZeroVariance,
)
from .rng import substream
from .voi_tests import impression_depth

__all__ = [
    "RegionAggregate",
    "WeightMatrix",
    "SpatialTestResult",
    "WeightScheme",
    "Tail",
    "ResidualKind",
    "Split",
    "aggregate_regions",
    "fit_poisson_rate",
    "build_weight_matrix",
    "morans_i",
    "gearys_c",
    "permutation_pvalue",
    "split_mask",
    "rsa_pipeline",
]

EARTH_RADIUS_KM = 6371.0088


class WeightScheme(str, Enum):
    KNN = "knn"
    INVERSE_DISTANCE = "inverse_distance"


class Tail(str, Enum):
    UPPER = "upper"
    LOWER = "lower"
    TWO_SIDED = "two_sided"


class ResidualKind(str, Enum):
    BASELINE = "baseline"
    BEHAVIOR_ADJUSTED = "behavior_adjusted"


class Split(str, Enum):
    ALL = "all"
    SPARSE = "sparse"
    RICH = "rich"


@dataclass(frozen=True)
class RegionAggregate:
    """Click and impression totals for one region."""

    region_id: int
    clicks: int
    impressions: int
    centroid: tuple[float, float]  # (lat, lon)
    behavioral_offset: float | None = None

    def __post_init__(self) -> None:
        if self.impressions < 1:
            raise ValueError(f"region {self.region_id} has no impressions")
        if not 0 <= self.clicks <= self.impressions:
            raise ValueError(
                f"region {self.region_id}: clicks must lie in [0, impressions]")


@dataclass(frozen=True)
class WeightMatrix:
    """Nonnegative spatial weights with zero diagonal."""

    matrix: np.ndarray
    scheme: str
    row_standardized: bool

    def __post_init__(self) -> None:
        w = self.matrix
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("weight matrix must be square")
        if np.any(np.diag(w) != 0):
            raise ValueError("weight matrix diagonal must be zero")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive total")

    def __len__(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class SpatialTestResult:
    """One autocorrelation statistic with its permutation reference."""

    statistic_name: str
    statistic: float
    expected: float  # mean of the statistic over permutations
    p_value: float
    n_permutations: int
    tail: Tail
    kind: ResidualKind | None = None


def aggregate_regions(rows: pd.DataFrame, region_key: str = "region_id",
                      predictions: np.ndarray | None = None,
                      min_impressions: int = 1,
                      ) -> tuple[list[RegionAggregate], list[int]]:
    """Sum clicks and impressions per region, with optional prediction offsets.

    ``predictions`` are per-impression CTR estimates aligned with ``rows``;
    each region's behavioral offset is the mean predicted log-rate. Regions
    with fewer than ``min_impressions`` impressions are dropped and their
    ids returned as the second element.
    """
    if region_key not in rows.columns:
        raise KeyError(f"rows lack a {region_key!r} column")
    work = pd.DataFrame({
        "region": rows[region_key].to_numpy(),
        "click": rows["click"].to_numpy(),
        "lat": rows["lat"].to_numpy(),
        "lon": rows["lon"].to_numpy(),
    })
    if predictions is not None:
        predictions = np.asarray(predictions, dtype=float)
        if len(predictions) != len(rows):
            raise ValueError("predictions misaligned with rows")
        if np.any(predictions <= 0):
            raise ValueError("predicted rates must be positive to take logs")
        work["log_rate"] = np.log(predictions)

    grouped = work.groupby("region", sort=True)
    aggregates, dropped = [], []
    for region, g in grouped:
        if len(g) < min_impressions:
            dropped.append(int(region))
            continue
        aggregates.append(RegionAggregate(
            region_id=int(region),
            clicks=int(g["click"].sum()),
            impressions=int(len(g)),
            centroid=(float(g["lat"].mean()), float(g["lon"].mean())),
            behavioral_offset=(float(g["log_rate"].mean())
                               if predictions is not None else None),
        ))
    return aggregates, dropped


def fit_poisson_rate(aggregates: Sequence[RegionAggregate],
                     use_behavioral_offset: bool = False,
                     ) -> tuple[float, np.ndarray]:
    """Intercept MLE of a Poisson rate model with exposure offsets.

    Clicks are modeled as Poisson(impressions * exp(alpha [+ offset])); the
    intercept has the closed form alpha = ln(sum(Y) / sum(I * exp(offset))).
    Residuals are observed log-rates minus fitted log-rates, where the
    observed log-rate of a zero-click region uses the continuity-corrected
    ln((Y + 0.5) / (I + 1)) so the logarithm is defined.
    """
    if not aggregates:
        raise EmptyInput("no regions to fit")
    y = np.array([a.clicks for a in aggregates], dtype=float)
    exposure = np.array([a.impressions for a in aggregates], dtype=float)
    if use_behavioral_offset:
        if any(a.behavioral_offset is None for a in aggregates):
            raise ValueError("behavioral offsets missing on some regions")
        offset = np.array([a.behavioral_offset for a in aggregates])
    else:
        offset = np.zeros(len(aggregates))

    alpha = float(np.log(y.sum() / (exposure * np.exp(offset)).sum()))
    log_rate = np.where(y > 0,
                        np.log(np.maximum(y, 0.5) / exposure),
                        np.log((y + 0.5) / (exposure + 1.0)))
    return alpha, log_rate - alpha - offset


def _haversine_km(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Pairwise great-circle distances between (lat, lon) points, in km."""
    phi = np.radians(lat)[:, None]
    lam = np.radians(lon)[:, None]
    dphi = phi - phi.T
    dlam = lam - lam.T
    h = np.sin(dphi / 2) ** 2 + np.cos(phi) * np.cos(phi.T) * np.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def build_weight_matrix(centroids: np.ndarray,
                        scheme: WeightScheme = WeightScheme.KNN,
                        k: int = 8, cutoff_km: float | None = None,
                        row_standardize: bool = True) -> WeightMatrix:
    """Spatial weights from centroids: symmetrized KNN or inverse distance.

    KNN links each region to its k nearest neighbors by great-circle
    distance (ties broken by region order) and symmetrizes by taking the
    elementwise max, so support is symmetric before row standardization.
    """
    pts = np.asarray(centroids, dtype=float)
    n = len(pts)
    if n < 2:
        raise DegenerateGeometry("need at least two regions for spatial weights")
    dist = _haversine_km(pts[:, 0], pts[:, 1])

    if scheme is WeightScheme.KNN:
        kk = min(k, n - 1)
        w = np.zeros((n, n))
        idx = np.arange(n)
        for i in range(n):
            d = dist[i].copy()
            d[i] = np.inf
            order = np.lexsort((idx, d))  # distance, then region order on ties
            w[i, order[:kk]] = 1.0
        w = np.maximum(w, w.T)
    else:
        safe = np.maximum(dist, 1e-9)
        w = 1.0 / safe
        np.fill_diagonal(w, 0.0)
        if cutoff_km is not None:
            w[dist > cutoff_km] = 0.0

    if row_standardize:
        sums = w.sum(axis=1, keepdims=True)
        w = np.divide(w, sums, out=np.zeros_like(w), where=sums > 0)
    return WeightMatrix(matrix=w, scheme=scheme.value,
                        row_standardized=row_standardize)


def _centered(residuals: np.ndarray, w: WeightMatrix) -> tuple[np.ndarray, np.ndarray]:
    eps = np.asarray(residuals, dtype=float)
    if len(eps) != len(w):
        raise ValueError("residual length does not match the weight matrix")
    z = eps - eps.mean()
    if np.all(z == 0):
        raise ZeroVariance("constant residuals have no autocorrelation")
    return eps, z


def morans_i(residuals: np.ndarray, w: WeightMatrix) -> float:
    """Global autocorrelation: cross products of deviations over neighbors.

    I = N / (sum of all weights) * sum_ij w_ij z_i z_j / sum_i z_i^2 with
    z the centered residuals; positive values mean neighboring regions
    deviate in the same direction.
    """
    _, z = _centered(residuals, w)
    s0 = w.matrix.sum()
    return float(len(z) / s0 * (z @ w.matrix @ z) / (z @ z))


def gearys_c(residuals: np.ndarray, w: WeightMatrix) -> float:
    """Local-contrast autocorrelation from squared neighbor differences.

    C = (N-1) * sum_ij w_ij (e_i - e_j)^2 / (2 * sum of weights * sum z^2);
    values below 1 indicate local similarity, above 1 local contrast.
    """
    eps, z = _centered(residuals, w)
    diff_sq = (eps[:, None] - eps[None, :]) ** 2
    s0 = w.matrix.sum()
    num = (len(eps) - 1) * (w.matrix * diff_sq).sum()
    return float(num / (2.0 * s0 * (z @ z)))


def permutation_pvalue(statistic: Callable[[np.ndarray, WeightMatrix], float],
                       residuals: np.ndarray, w: WeightMatrix,
                       n_perm: int = 9999, seed: int = 0,
                       tail: Tail = Tail.UPPER,
                       kind: ResidualKind | None = None,
                       salt: str = "") -> SpatialTestResult:
    """Permutation test of a spatial statistic by shuffling region labels.

    p = (1 + #{permuted values at least as extreme}) / (1 + n_perm), which
    keeps p in (0, 1]. The two-sided tail measures distance from the
    permutation mean.
    """
    if n_perm < 99:
        raise ValueError("use at least 99 permutations")
    eps = np.asarray(residuals, dtype=float)
    observed = statistic(eps, w)
    rng = substream(seed, f"spatial-permutation:{salt}")
    perms = np.empty(n_perm)
    for b in range(n_perm):
        perms[b] = statistic(rng.permutation(eps), w)
    expected = float(perms.mean())
    if tail is Tail.UPPER:
        extreme = int(np.sum(perms >= observed))
    elif tail is Tail.LOWER:
        extreme = int(np.sum(perms <= observed))
    else:
        extreme = int(np.sum(np.abs(perms - expected) >= abs(observed - expected)))
    return SpatialTestResult(
        statistic_name=getattr(statistic, "__name__", "statistic"),
        statistic=observed, expected=expected,
        p_value=(1 + extreme) / (1 + n_perm),
        n_permutations=n_perm, tail=tail, kind=kind,
    )


def split_mask(rows: pd.DataFrame, split: Split) -> np.ndarray:
    """Select each user's early half (SPARSE) or late half (RICH).

    With m impressions for a user, SPARSE takes the first floor(m/2) and
    RICH the last floor(m/2): equal counts, disjoint, and any odd middle
    impression belongs to neither.
    """
    if split is Split.ALL:
        return np.ones(len(rows), dtype=bool)
    depth = impression_depth(rows)
    totals = rows.groupby("user_id")["user_id"].transform("size").to_numpy()
    half = totals // 2
    if split is Split.SPARSE:
        return depth <= half
    return depth > totals - half


def rsa_pipeline(rows: pd.DataFrame,
                 predict: Callable[[pd.DataFrame], np.ndarray] | None,
                 region_keys: Sequence[str] = ("region_id",),
                 splits: Sequence[Split] = (Split.ALL, Split.SPARSE, Split.RICH),
                 k: int = 8, n_perm: int = 9999, seed: int = 0,
                 min_impressions: int = 10,
                 min_regions: int = 10) -> pd.DataFrame:
    """Residual autocorrelation report across region keys and history splits.

    ``predict`` maps a row subset to per-impression CTR estimates from a
    behavioral model; when None only baseline residuals are tested. Returns
    one row per (region key, split, residual kind) with both statistics.
    """
    records = []
    for key in region_keys:
        for split in splits:
            mask = split_mask(rows, split)
            sub = rows.loc[mask].reset_index(drop=True)
            preds = predict(sub) if predict is not None else None
            aggregates, dropped = aggregate_regions(
                sub, key, predictions=preds, min_impressions=min_impressions)
            if len(aggregates) < min_regions:
                raise InsufficientRegions(
                    f"{key}/{split.value}: {len(aggregates)} regions after "
                    f"flooring, need {min_regions}")
            centroids = np.array([a.centroid for a in aggregates])
            w = build_weight_matrix(centroids, WeightScheme.KNN, k=k)
            kinds = [ResidualKind.BASELINE]
            if preds is not None:
                kinds.append(ResidualKind.BEHAVIOR_ADJUSTED)
            for kind in kinds:
                adjusted = kind is ResidualKind.BEHAVIOR_ADJUSTED
                _, eps = fit_poisson_rate(aggregates,
                                          use_behavioral_offset=adjusted)
                salt = f"{key}:{split.value}:{kind.value}"
                moran = permutation_pvalue(morans_i, eps, w, n_perm, seed,
                                           Tail.UPPER, kind, salt + ":moran")
                geary = permutation_pvalue(gearys_c, eps, w, n_perm, seed,
                                           Tail.LOWER, kind, salt + ":geary")
                records.append({
                    "region_key": key, "split": split.value,
                    "residual_kind": kind.value,
                    "n_regions": len(aggregates),
                    "dropped_regions": len(dropped),
                    "moran_i": moran.statistic,
                    "moran_expected": moran.expected,
                    "moran_p": moran.p_value,
                    "geary_c": geary.statistic,
                    "geary_expected": geary.expected,
                    "geary_p": geary.p_value,
                    "n_perm": n_perm,
                })
    return pd.DataFrame(records)
