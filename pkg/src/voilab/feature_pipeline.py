"""Feature construction for the four information regimes.

Turns raw logged impressions into model inputs under four nested feature
sets: context only, context+geography, context+behavior, and all three.
Behavioral counters are emitted strictly from each row's past (the current
click never enters its own features), population-level counters accumulate
in global arrival order, and the train/test split is by user.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from .errors import InvalidTime, OrderingViolation
from .market_sim import ImpressionLog

__all__ = [
    "Regime",
    "TopKTables",
    "BehavioralState",
    "RegimeMatrix",
    "CONTEXT_FEATURES",
    "GEO_FEATURES",
    "BEHAVIOR_FEATURES",
    "CATEGORICAL_FEATURES",
    "regime_features",
    "build_topk_tables",
    "encode_context",
    "encode_context_frame",
    "update_and_emit_behavioral",
    "behavioral_frame",
    "assemble_regime",
    "build_regime_matrix",
    "split_users_train_test",
]


class Regime(str, Enum):
    CONTEXT_ONLY = "context_only"
    GEO = "geo"
    BEHAVIOR = "behavior"
    GEO_BEHAVIOR = "geo_behavior"

    @property
    def has_geo(self) -> bool:
        return self in (Regime.GEO, Regime.GEO_BEHAVIOR)

    @property
    def has_behavior(self) -> bool:
        return self in (Regime.BEHAVIOR, Regime.GEO_BEHAVIOR)


CONTEXT_FEATURES = [
    "hour_sin", "hour_cos", "minute_sin", "minute_cos",
    "brand_code", "app_code", "isp_code", "connectivity_code",
]
GEO_FEATURES = ["lat", "lon", "region_code", "city_code"]
BEHAVIOR_FEATURES = [
    "exposure_count",            # prior exposures of the user
    "click_history",             # prior clicks of the user
    "session_ctr",               # click_history / exposure_count
    "time_since_exposure",       # gap to the previous impression, -1 if none
    "time_since_click",          # gap to the last click, -1 if none
    "ad_frequency",              # exposures of the user to this ad, incl. current
    "user_ad_ctr",               # prior clicks on this ad / prior exposures to it
    "ad_ctr_overall",            # same ratio pooled over all users, arrival order
    "app_usage_share",           # prior exposures in this app / all prior exposures
    "app_click_share",           # prior clicks in this app / all prior clicks
    "app_ad_usage_share",        # exposures to this ad in this app / exposures to this ad
    "app_ad_click_share",        # clicks on this ad in this app / clicks on this ad
    "app_usage_share_overall",   # population exposure share of the app
    "app_click_share_overall",   # population click share of the app
]
# coded categoricals; downstream learners may one-hot or embed these
CATEGORICAL_FEATURES = frozenset(
    ["brand_code", "app_code", "isp_code", "connectivity_code", "region_code", "city_code"]
)

SENTINEL = -1.0  # for time gaps with no prior event


def regime_features(regime: Regime) -> list[str]:
    names = list(CONTEXT_FEATURES)
    if regime.has_geo:
        names += GEO_FEATURES
    if regime.has_behavior:
        names += BEHAVIOR_FEATURES
    return names


@dataclass(frozen=True)
class TopKTables:
    """Frequency-rank codes for categorical columns, frozen on training rows.

    A raw value maps to its rank (1 = most frequent) when it is among the
    top_k most frequent values of its column, and to 0 otherwise. Ties are
    broken toward the smaller raw value.
    """

    top_k: int
    tables: dict[str, dict[int, int]]

    def code(self, column: str, value: int) -> int:
        return self.tables[column].get(int(value), 0)

    def code_series(self, column: str, values: pd.Series) -> np.ndarray:
        table = self.tables[column]
        return values.map(lambda v: table.get(int(v), 0)).to_numpy(dtype=np.int64)

    def to_json(self, path: str) -> None:
        payload = {
            "top_k": self.top_k,
            "tables": {c: {str(k): v for k, v in t.items()} for c, t in self.tables.items()},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path: str) -> "TopKTables":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        tables = {c: {int(k): int(v) for k, v in t.items()}
                  for c, t in payload["tables"].items()}
        return cls(top_k=int(payload["top_k"]), tables=tables)


TOPK_COLUMNS = ("brand", "app_id", "isp", "connectivity")


def build_topk_tables(train_rows: pd.DataFrame, top_k: int = 50,
                      columns: tuple[str, ...] = TOPK_COLUMNS) -> TopKTables:
    tables: dict[str, dict[int, int]] = {}
    for col in columns:
        counts = train_rows[col].value_counts()
        order = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        tables[col] = {int(val): rank + 1 for rank, (val, _) in enumerate(order[:top_k])}
    return TopKTables(top_k=top_k, tables=tables)


def encode_context(hour: int, minute: int, brand: int, app: int, isp: int,
                   connectivity: int, tables: TopKTables) -> dict[str, float]:
    """Cyclical time encoding plus frequency-rank codes for one impression."""
    if not 0 <= hour <= 23:
        raise InvalidTime(f"hour {hour} outside [0, 23]")
    if not 0 <= minute <= 59:
        raise InvalidTime(f"minute {minute} outside [0, 59]")
    return {
        "hour_sin": float(np.sin(2.0 * np.pi * hour / 24.0)),
        "hour_cos": float(np.cos(2.0 * np.pi * hour / 24.0)),
        "minute_sin": float(np.sin(2.0 * np.pi * minute / 60.0)),
        "minute_cos": float(np.cos(2.0 * np.pi * minute / 60.0)),
        "brand_code": float(tables.code("brand", brand)),
        "app_code": float(tables.code("app_id", app)),
        "isp_code": float(tables.code("isp", isp)),
        "connectivity_code": float(tables.code("connectivity", connectivity)),
    }


def encode_context_frame(rows: pd.DataFrame, tables: TopKTables) -> pd.DataFrame:
    hour = rows["hour"].to_numpy()
    minute = rows["minute"].to_numpy()
    if hour.min() < 0 or hour.max() > 23:
        raise InvalidTime("hour outside [0, 23]")
    if minute.min() < 0 or minute.max() > 59:
        raise InvalidTime("minute outside [0, 59]")
    return pd.DataFrame({
        "hour_sin": np.sin(2.0 * np.pi * hour / 24.0),
        "hour_cos": np.cos(2.0 * np.pi * hour / 24.0),
        "minute_sin": np.sin(2.0 * np.pi * minute / 60.0),
        "minute_cos": np.cos(2.0 * np.pi * minute / 60.0),
        "brand_code": tables.code_series("brand", rows["brand"]).astype(float),
        "app_code": tables.code_series("app_id", rows["app_id"]).astype(float),
        "isp_code": tables.code_series("isp", rows["isp"]).astype(float),
        "connectivity_code": tables.code_series("connectivity", rows["connectivity"]).astype(float),
    }, index=rows.index)


class BehavioralState:
    """Running interaction counters at user, user-ad, user-app, and population level.

    emit() reads the counters without touching them; update() folds in one
    observed row. Rows must arrive in nondecreasing timestamp order per user;
    population-level counters reflect the presentation order, so the
    canonical pipeline presents rows in global arrival order.
    """

    def __init__(self) -> None:
        self.user_expo: dict[int, int] = defaultdict(int)
        self.user_click: dict[int, int] = defaultdict(int)
        self.user_last_t: dict[int, float] = {}
        self.user_last_click_t: dict[int, float] = {}
        self.user_ad_expo: dict[tuple[int, int], int] = defaultdict(int)
        self.user_ad_click: dict[tuple[int, int], int] = defaultdict(int)
        self.user_app_expo: dict[tuple[int, int], int] = defaultdict(int)
        self.user_app_click: dict[tuple[int, int], int] = defaultdict(int)
        self.user_app_ad_expo: dict[tuple[int, int, int], int] = defaultdict(int)
        self.user_app_ad_click: dict[tuple[int, int, int], int] = defaultdict(int)
        self.ad_expo: dict[int, int] = defaultdict(int)
        self.ad_click: dict[int, int] = defaultdict(int)
        self.app_expo: dict[int, int] = defaultdict(int)
        self.app_click: dict[int, int] = defaultdict(int)
        self.total_expo: int = 0
        self.total_click: int = 0

    @staticmethod
    def _ratio(num: int, den: int) -> float:
        return num / den if den > 0 else 0.0

    def emit(self, user: int, t: float, app: int, ad: int) -> dict[str, float]:
        """Features for an impression of `ad` in `app`, from strictly prior history.

        `ad` may differ from the logged ad to score counterfactual candidates;
        ad_frequency counts the current exposure itself (prior count + 1).
        """
        ec = self.user_expo[user]
        ch = self.user_click[user]
        ua_e = self.user_ad_expo[(user, ad)]
        ua_c = self.user_ad_click[(user, ad)]
        return {
            "exposure_count": float(ec),
            "click_history": float(ch),
            "session_ctr": self._ratio(ch, ec),
            "time_since_exposure": t - self.user_last_t[user] if user in self.user_last_t else SENTINEL,
            "time_since_click": t - self.user_last_click_t[user] if user in self.user_last_click_t else SENTINEL,
            "ad_frequency": float(ua_e + 1),
            "user_ad_ctr": self._ratio(ua_c, ua_e),
            "ad_ctr_overall": self._ratio(self.ad_click[ad], self.ad_expo[ad]),
            "app_usage_share": self._ratio(self.user_app_expo[(user, app)], ec),
            "app_click_share": self._ratio(self.user_app_click[(user, app)], ch),
            "app_ad_usage_share": self._ratio(self.user_app_ad_expo[(user, app, ad)], ua_e),
            "app_ad_click_share": self._ratio(self.user_app_ad_click[(user, app, ad)], ua_c),
            "app_usage_share_overall": self._ratio(self.app_expo[app], self.total_expo),
            "app_click_share_overall": self._ratio(self.app_click[app], self.total_click),
        }

    def update(self, user: int, t: float, app: int, ad: int, click: int) -> None:
        last = self.user_last_t.get(user)
        if last is not None and t < last:
            raise OrderingViolation(f"user {user}: timestamp {t} after {last}")
        self.user_expo[user] += 1
        self.user_last_t[user] = t
        self.user_ad_expo[(user, ad)] += 1
        self.user_app_expo[(user, app)] += 1
        self.user_app_ad_expo[(user, app, ad)] += 1
        self.ad_expo[ad] += 1
        self.app_expo[app] += 1
        self.total_expo += 1
        if click:
            self.user_click[user] += 1
            self.user_last_click_t[user] = t
            self.user_ad_click[(user, ad)] += 1
            self.user_app_click[(user, app)] += 1
            self.user_app_ad_click[(user, app, ad)] += 1
            self.ad_click[ad] += 1
            self.app_click[app] += 1
            self.total_click += 1


def update_and_emit_behavioral(state: BehavioralState, row: dict) -> dict[str, float]:
    """Emit the row's behavioral features, then fold the row into the state."""
    feats = state.emit(int(row["user_id"]), float(row["timestamp_s"]),
                       int(row["app_id"]), int(row["ad_id"]))
    state.update(int(row["user_id"]), float(row["timestamp_s"]),
                 int(row["app_id"]), int(row["ad_id"]), int(row["click"]))
    return feats


def behavioral_frame(rows: pd.DataFrame, ad_override: int | None = None) -> pd.DataFrame:
    """Behavioral features for every row, scanned in global arrival order.

    With ad_override, ad-dependent features are computed as if the candidate
    ad were shown, while state updates still use the logged ad and click.
    Returns a frame aligned with the input row order.
    """
    order = np.argsort(rows["impression_id"].to_numpy(), kind="stable")
    user = rows["user_id"].to_numpy()[order]
    t = rows["timestamp_s"].to_numpy()[order]
    app = rows["app_id"].to_numpy()[order]
    ad = rows["ad_id"].to_numpy()[order]
    click = rows["click"].to_numpy()[order]

    state = BehavioralState()
    n = len(rows)
    out = {name: np.empty(n) for name in BEHAVIOR_FEATURES}
    for i in range(n):
        emit_ad = int(ad[i]) if ad_override is None else int(ad_override)
        feats = state.emit(int(user[i]), float(t[i]), int(app[i]), emit_ad)
        for name in BEHAVIOR_FEATURES:
            out[name][i] = feats[name]
        state.update(int(user[i]), float(t[i]), int(app[i]), int(ad[i]), int(click[i]))

    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.arange(n)
    return pd.DataFrame({name: col[inverse] for name, col in out.items()}, index=rows.index)


def geo_frame(rows: pd.DataFrame) -> pd.DataFrame:
    return pd.DataFrame({
        "lat": rows["lat"].to_numpy(dtype=float),
        "lon": rows["lon"].to_numpy(dtype=float),
        "region_code": rows["region_id"].to_numpy(dtype=float),
        "city_code": rows["city_id"].to_numpy(dtype=float),
    }, index=rows.index)


def assemble_regime(row: dict, contextual: dict[str, float], geographical: dict[str, float],
                    behavioral: dict[str, float], spec: Regime) -> dict[str, float]:
    """Concatenate component features for one row in the documented order."""
    vec = {"impression_id": row["impression_id"]}
    vec.update({k: contextual[k] for k in CONTEXT_FEATURES})
    if spec.has_geo:
        vec.update({k: geographical[k] for k in GEO_FEATURES})
    if spec.has_behavior:
        vec.update({k: behavioral[k] for k in BEHAVIOR_FEATURES})
    return vec


@dataclass(frozen=True)
class RegimeMatrix:
    """Feature matrix for one regime: metadata columns then features in fixed order."""

    regime: Regime
    frame: pd.DataFrame  # impression_id, user_id, ad_id, timestamp_s, click, <features>
    feature_names: list[str]
    categorical: list[str] = field(default_factory=list)

    def X(self) -> np.ndarray:
        return self.frame[self.feature_names].to_numpy(dtype=float)

    def y(self) -> np.ndarray:
        return self.frame["click"].to_numpy(dtype=int)

    def users(self) -> np.ndarray:
        return self.frame["user_id"].to_numpy()

    def to_csv(self, path: str) -> None:
        self.frame.to_csv(path, index=False, float_format="%.17g")


def build_regime_matrix(rows: pd.DataFrame, regime: Regime, tables: TopKTables,
                        ad_override: int | None = None,
                        behavioral: pd.DataFrame | None = None) -> RegimeMatrix:
    """Assemble the full feature matrix for a regime.

    `behavioral` can be passed in to reuse a precomputed behavioral frame
    (it only depends on ad_override, not on the regime).
    """
    parts = [encode_context_frame(rows, tables)]
    if regime.has_geo:
        parts.append(geo_frame(rows))
    if regime.has_behavior:
        if behavioral is None:
            behavioral = behavioral_frame(rows, ad_override=ad_override)
        parts.append(behavioral[BEHAVIOR_FEATURES])
    names = regime_features(regime)
    meta = ["impression_id", "user_id", "ad_id", "timestamp_s", "click"]
    frame = pd.concat(
        [rows[meta].reset_index(drop=True)]
        + [p.reset_index(drop=True) for p in parts], axis=1)[meta + names]
    cats = [c for c in names if c in CATEGORICAL_FEATURES]
    return RegimeMatrix(regime=regime, frame=frame, feature_names=names, categorical=cats)


def split_users_train_test(log: ImpressionLog | pd.DataFrame, train_frac: float,
                           seed: int) -> tuple[pd.DataFrame, pd.DataFrame]:
    """User-level split: every user's rows land wholly in one partition."""
    rows = log.rows if isinstance(log, ImpressionLog) else log
    if len(rows) == 0:
        raise ValueError("log is empty")
    if not 0.0 < train_frac <= 1.0:
        raise ValueError("train_frac must lie in (0, 1]")
    users = np.unique(rows["user_id"].to_numpy())
    rng = np.random.default_rng(seed)
    in_train = rng.random(len(users)) < train_frac
    train_users = set(users[in_train].tolist())
    mask = rows["user_id"].isin(train_users).to_numpy()
    return rows[mask].reset_index(drop=True), rows[~mask].reset_index(drop=True)
