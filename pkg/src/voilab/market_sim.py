"""Synthetic ad-market simulator with exact ground truth.

Generates logged impressions under a quasi-proportional allocation rule
(win probability proportional to bid times quality over the eligible set),
with latent user preferences, an optional smooth spatial confound field,
and optional local click influence. Every row records the exact allocation
probability of the shown ad and the exact click probability, so downstream
estimators can be tested against the truth instead of against each other.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, asdict
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .errors import EmptyEligibleSet, IneligibleAction, InvalidBidQuality
from .rng import substream

__all__ = [
    "SimConfig",
    "LatentUser",
    "AdSpec",
    "SpatialField",
    "ImpressionLog",
    "OracleValue",
    "IMPRESSION_COLUMNS",
    "quasi_proportional_probs",
    "sample_market",
    "simulate_logs",
    "oracle_policy_value",
]

# Fixed CSV header order for the main log.
IMPRESSION_COLUMNS = [
    "impression_id", "user_id", "timestamp_s", "app_id", "ad_id", "click",
    "lat", "lon", "region_id", "city_id", "brand", "isp", "connectivity",
    "hour", "minute", "bid", "quality", "true_propensity", "true_ctr",
    "eligibility_mask",
]


@dataclass(frozen=True)
class SimConfig:
    """Knobs for one simulated market.

    Parameters
    ----------
    n_users, n_ads, n_apps : int
        Population sizes. Ad 0 never carries a targeting filter, so every
        impression has at least one eligible ad.
    horizon_hours : float
        Length of the simulated window.
    d_omega : int
        Dimension of the latent preference vector.
    influence_strength : float
        Scale on the local-influence logit term (decayed count of recent
        clicks on the same ad in the same or adjacent grid region).
    confound_strength : float
        Scale on the amplitudes of the smooth spatial confound field.
    base_logit : float
        Intercept of the click logit. The default corresponds to a ~2%
        baseline click rate.
    seed : int
        Master seed; all stages draw from named substreams of it.
    grid_rows, grid_cols : int
        Coarse region grid over the bounding box. Cities use a finer grid
        (each region split city_subdiv x city_subdiv).
    """

    n_users: int = 200
    n_ads: int = 4
    n_apps: int = 6
    horizon_hours: float = 48.0
    d_omega: int = 4
    influence_strength: float = 0.0
    confound_strength: float = 0.0
    base_logit: float = -3.89182029811063
    seed: int = 0
    grid_rows: int = 6
    grid_cols: int = 6
    # artifact plumbing beyond the core knobs
    bbox: tuple[float, float, float, float] = (30.0, 36.0, 100.0, 106.0)
    city_subdiv: int = 3
    match_weight: float = 1.0
    mean_arrival_per_hour: float = 1.0
    arrival_sigma: float = 0.5
    targeted_frac: float = 0.0
    n_brands: int = 10
    n_isps: int = 5
    n_connectivity: int = 3
    n_field_basis: int = 8
    field_max_freq: int = 3
    jitter_deg: float = 0.05
    bid_range: tuple[float, float] = (0.5, 4.0)
    quality_range: tuple[float, float] = (0.5, 2.0)
    influence_window_s: float = 7200.0
    influence_tau_s: float = 1800.0
    influence_neighbor_weight: float = 0.5

    def __post_init__(self) -> None:
        for name in ("n_users", "n_ads", "n_apps", "grid_rows", "grid_cols",
                     "n_brands", "n_isps", "n_connectivity", "city_subdiv"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.horizon_hours <= 0:
            raise ValueError("horizon_hours must be > 0")
        if self.influence_strength < 0 or self.confound_strength < 0:
            raise ValueError("strength knobs must be >= 0")
        if not 0.0 <= self.targeted_frac <= 1.0:
            raise ValueError("targeted_frac must lie in [0, 1]")
        lat0, lat1, lon0, lon1 = self.bbox
        if not (lat1 > lat0 and lon1 > lon0):
            raise ValueError("bbox must satisfy lat_max > lat_min and lon_max > lon_min")

    @property
    def n_regions(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def horizon_s(self) -> float:
        return self.horizon_hours * 3600.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = list(self.bbox)
        d["bid_range"] = list(self.bid_range)
        d["quality_range"] = list(self.quality_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        for key in ("bbox", "bid_range", "quality_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path: str) -> "SimConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class LatentUser:
    user_id: int
    omega: np.ndarray
    home_lat: float
    home_lon: float
    region_id: int
    city_id: int
    device_brand: int
    isp: int
    connectivity: int
    arrival_rate: float  # events per hour

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.omega)):
            raise ValueError("omega must be finite")
        if self.arrival_rate <= 0:
            raise ValueError("arrival_rate must be > 0")


@dataclass(frozen=True, eq=False)
class AdSpec:
    ad_id: int
    bid: float
    quality: float
    match_vector: np.ndarray
    geo_weight: float = 0.0
    allowed_regions: frozenset[int] | None = None
    allowed_hours: frozenset[int] | None = None
    allowed_apps: frozenset[int] | None = None

    def __post_init__(self) -> None:
        if not (self.bid > 0 and self.quality > 0):
            raise InvalidBidQuality(
                f"ad {self.ad_id}: bid*quality must be positive, got {self.bid}*{self.quality}"
            )
        if not np.all(np.isfinite(self.match_vector)):
            raise ValueError("match_vector must be finite")


@dataclass(frozen=True)
class SpatialField:
    """Low-frequency random Fourier field over the bounding box.

    value(lat, lon) = offset + sum_k a_k cos(2 pi (fx_k u + fy_k v) + phase_k)
    with (u, v) the box-normalized coordinates. Bounded by sum|a| + |offset|.
    """

    basis: tuple[tuple[float, float, float, float], ...]  # (fx, fy, amplitude, phase)
    offset: float
    bbox: tuple[float, float, float, float]

    def value(self, lat: np.ndarray | float, lon: np.ndarray | float) -> np.ndarray:
        lat0, lat1, lon0, lon1 = self.bbox
        u = (np.asarray(lat, dtype=float) - lat0) / (lat1 - lat0)
        v = (np.asarray(lon, dtype=float) - lon0) / (lon1 - lon0)
        out = np.full(np.broadcast(u, v).shape, self.offset, dtype=float)
        for fx, fy, amp, phase in self.basis:
            out += amp * np.cos(2.0 * np.pi * (fx * u + fy * v) + phase)
        return out

    def bound(self) -> float:
        return abs(self.offset) + sum(abs(a) for _, _, a, _ in self.basis)


@dataclass(frozen=True)
class ImpressionLog:
    """Logged impressions plus the exact ground-truth sidecar.

    `rows` is sorted by (user_id, timestamp_s) and uses IMPRESSION_COLUMNS.
    `ground_truth` is row-aligned with `rows` and carries the full allocation
    probability vector (pi_<a>) and the per-ad true click probability
    (ctr_<a>) for every impression.
    """

    rows: pd.DataFrame
    ground_truth: pd.DataFrame
    n_ads: int

    def __len__(self) -> int:
        return len(self.rows)

    def eligibility_matrix(self) -> np.ndarray:
        mask = self.rows["eligibility_mask"].to_numpy()
        bits = np.arange(self.n_ads, dtype=np.int64)
        return (mask[:, None] >> bits[None, :]) & 1 == 1

    def true_propensity_matrix(self) -> np.ndarray:
        cols = [f"pi_{a}" for a in range(self.n_ads)]
        return self.ground_truth[cols].to_numpy(dtype=float)

    def true_ctr_matrix(self) -> np.ndarray:
        cols = [f"ctr_{a}" for a in range(self.n_ads)]
        return self.ground_truth[cols].to_numpy(dtype=float)

    def to_csv(self, rows_path: str, sidecar_path: str) -> None:
        self.rows.to_csv(rows_path, index=False, float_format="%.17g")
        self.ground_truth.to_csv(sidecar_path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, rows_path: str, sidecar_path: str) -> "ImpressionLog":
        rows = pd.read_csv(rows_path, float_precision="round_trip")
        gt = pd.read_csv(sidecar_path, float_precision="round_trip")
        n_ads = sum(1 for c in gt.columns if c.startswith("pi_"))
        return cls(rows=rows, ground_truth=gt, n_ads=n_ads)


@dataclass(frozen=True)
class OracleValue:
    value: float
    mc_se: float
    n_mc: int


def quasi_proportional_probs(
    bid_quality: Sequence[float] | np.ndarray,
    eligible: Sequence[bool] | np.ndarray | None = None,
) -> np.ndarray:
    """Allocation probabilities proportional to bid*quality over the eligible set.

    Ineligible entries get exactly zero. Raises EmptyEligibleSet when nothing
    is eligible and InvalidBidQuality when an eligible entry has nonpositive
    or non-finite bid*quality.
    """
    bq = np.asarray(bid_quality, dtype=float)
    if eligible is None:
        elig = np.ones(bq.shape, dtype=bool)
    else:
        elig = np.asarray(eligible, dtype=bool)
    if bq.shape != elig.shape:
        raise ValueError("bid_quality and eligible must have the same shape")
    if not elig.any():
        raise EmptyEligibleSet("no eligible ad")
    picked = bq[elig]
    if not np.all(np.isfinite(picked)) or np.any(picked <= 0):
        raise InvalidBidQuality("eligible entries must have positive finite bid*quality")
    p = np.where(elig, bq, 0.0)
    return p / p.sum()


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


def region_ids_of(lat: np.ndarray, lon: np.ndarray, config: SimConfig) -> np.ndarray:
    return _grid_ids(lat, lon, config.bbox, config.grid_rows, config.grid_cols)


def city_ids_of(lat: np.ndarray, lon: np.ndarray, config: SimConfig) -> np.ndarray:
    return _grid_ids(lat, lon, config.bbox,
                     config.grid_rows * config.city_subdiv,
                     config.grid_cols * config.city_subdiv)


def _grid_ids(lat, lon, bbox, rows, cols) -> np.ndarray:
    lat0, lat1, lon0, lon1 = bbox
    r = np.clip(((np.asarray(lat) - lat0) / (lat1 - lat0) * rows).astype(int), 0, rows - 1)
    c = np.clip(((np.asarray(lon) - lon0) / (lon1 - lon0) * cols).astype(int), 0, cols - 1)
    return r * cols + c


def sample_market(config: SimConfig) -> tuple[list[LatentUser], list[AdSpec], SpatialField]:
    """Draw the fixed market: users, ads, and the spatial confound field.

    Deterministic given config.seed. Latent preferences are standard
    spherical Gaussians; homes are uniform in the bounding box; bids and
    quality scores are log-uniform; field amplitudes scale with
    confound_strength (zero strength means a flat field).
    """
    rng = substream(config.seed, "population")
    lat0, lat1, lon0, lon1 = config.bbox

    omega = rng.standard_normal((config.n_users, config.d_omega))
    home_lat = rng.uniform(lat0, lat1, config.n_users)
    home_lon = rng.uniform(lon0, lon1, config.n_users)
    brand = rng.choice(config.n_brands, size=config.n_users, p=_zipf_weights(config.n_brands))
    isp = rng.choice(config.n_isps, size=config.n_users, p=_zipf_weights(config.n_isps))
    conn = rng.choice(config.n_connectivity, size=config.n_users,
                      p=_zipf_weights(config.n_connectivity))
    # lognormal with unit mean so the population rate averages mean_arrival_per_hour
    sig = config.arrival_sigma
    rate = config.mean_arrival_per_hour * rng.lognormal(-0.5 * sig * sig, sig, config.n_users)
    region = region_ids_of(home_lat, home_lon, config)
    city = city_ids_of(home_lat, home_lon, config)

    users = [
        LatentUser(
            user_id=i, omega=omega[i], home_lat=float(home_lat[i]), home_lon=float(home_lon[i]),
            region_id=int(region[i]), city_id=int(city[i]), device_brand=int(brand[i]),
            isp=int(isp[i]), connectivity=int(conn[i]), arrival_rate=float(rate[i]),
        )
        for i in range(config.n_users)
    ]

    blo, bhi = config.bid_range
    qlo, qhi = config.quality_range
    bids = np.exp(rng.uniform(np.log(blo), np.log(bhi), config.n_ads))
    quals = np.exp(rng.uniform(np.log(qlo), np.log(qhi), config.n_ads))
    mvecs = rng.standard_normal((config.n_ads, config.d_omega)) / np.sqrt(config.d_omega)
    geo_w = rng.standard_normal(config.n_ads)

    ads: list[AdSpec] = []
    for a in range(config.n_ads):
        regions = hours = apps = None
        # ad 0 stays unfiltered so every impression has an eligible ad
        if a > 0 and rng.random() < config.targeted_frac:
            pick = rng.random(3) < 0.5
            if not pick.any():
                pick[0] = True
            if pick[0]:
                k = max(1, config.n_regions // 2)
                regions = frozenset(
                    int(x) for x in rng.choice(config.n_regions, size=k, replace=False))
            if pick[1]:
                start = int(rng.integers(0, 24))
                hours = frozenset((start + h) % 24 for h in range(12))
            if pick[2]:
                k = max(1, config.n_apps // 2)
                apps = frozenset(int(x) for x in rng.choice(config.n_apps, size=k, replace=False))
        ads.append(AdSpec(
            ad_id=a, bid=float(bids[a]), quality=float(quals[a]), match_vector=mvecs[a],
            geo_weight=float(geo_w[a]), allowed_regions=regions, allowed_hours=hours,
            allowed_apps=apps,
        ))

    n_b = config.n_field_basis
    freqs = rng.integers(1, config.field_max_freq + 1, size=(n_b, 2))
    signs = rng.choice([-1.0, 1.0], size=(n_b, 2))
    amps = config.confound_strength * rng.standard_normal(n_b) / np.sqrt(n_b)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_b)
    basis = tuple(
        (float(freqs[k, 0] * signs[k, 0]), float(freqs[k, 1] * signs[k, 1]),
         float(amps[k]), float(phases[k]))
        for k in range(n_b)
    )
    field = SpatialField(basis=basis, offset=0.0, bbox=config.bbox)
    return users, ads, field


def _eligibility_matrix(ads: list[AdSpec], region: np.ndarray, hour: np.ndarray,
                        app: np.ndarray) -> np.ndarray:
    n = len(region)
    elig = np.ones((n, len(ads)), dtype=bool)
    for a, ad in enumerate(ads):
        if ad.allowed_regions is not None:
            elig[:, a] &= np.isin(region, list(ad.allowed_regions))
        if ad.allowed_hours is not None:
            elig[:, a] &= np.isin(hour, list(ad.allowed_hours))
        if ad.allowed_apps is not None:
            elig[:, a] &= np.isin(app, list(ad.allowed_apps))
    return elig


class _InfluenceState:
    """Recent-click memory per ad with spatial kernel and exponential decay.

    A click on ad a at time s in region r contributes
    K(r, r') * exp(-(t - s)/tau) to ad a's influence at time t in region r',
    where K is 1 in the same region, `neighbor_weight` in rook-adjacent grid
    regions, 0 elsewhere; contributions older than the window are dropped.
    """

    def __init__(self, n_ads: int, config: SimConfig) -> None:
        self.window = config.influence_window_s
        self.tau = config.influence_tau_s
        self.neighbor_w = config.influence_neighbor_weight
        self.cols = config.grid_cols
        self.clicks: list[deque[tuple[float, int]]] = [deque() for _ in range(n_ads)]

    def _kernel(self, r_click: int, r_now: int) -> float:
        if r_click == r_now:
            return 1.0
        dr = abs(r_click // self.cols - r_now // self.cols)
        dc = abs(r_click % self.cols - r_now % self.cols)
        return self.neighbor_w if dr + dc == 1 else 0.0

    def vector(self, region: int, t: float, n_ads: int) -> np.ndarray:
        out = np.zeros(n_ads)
        for a in range(n_ads):
            dq = self.clicks[a]
            while dq and t - dq[0][0] > self.window:
                dq.popleft()
            acc = 0.0
            for s, r in dq:
                k = self._kernel(r, region)
                if k > 0.0:
                    acc += k * np.exp(-(t - s) / self.tau)
            out[a] = acc
        return out

    def record(self, ad: int, region: int, t: float) -> None:
        self.clicks[ad].append((t, region))


def _draw_arrivals(users: list[LatentUser], config: SimConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    """Sample the impression stream in global time order.

    Per user the event count is Poisson(rate * horizon) and event times are
    uniform on the window, which realizes exponential inter-arrival gaps.
    Locations jitter around home; apps follow a shared Zipf-like draw.
    """
    rates = np.array([u.arrival_rate for u in users])
    counts = rng.poisson(rates * config.horizon_hours)
    n = int(counts.sum())
    user_idx = np.repeat(np.arange(len(users)), counts)
    t = rng.uniform(0.0, config.horizon_s, n)
    lat0, lat1, lon0, lon1 = config.bbox
    home_lat = np.array([u.home_lat for u in users])[user_idx]
    home_lon = np.array([u.home_lon for u in users])[user_idx]
    lat = np.clip(home_lat + rng.normal(0.0, config.jitter_deg, n), lat0, lat1)
    lon = np.clip(home_lon + rng.normal(0.0, config.jitter_deg, n), lon0, lon1)
    app = rng.choice(config.n_apps, size=n, p=_zipf_weights(config.n_apps))
    order = np.argsort(t, kind="stable")
    return user_idx[order], t[order], lat[order], lon[order], app[order]


def _allocation(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row of a probability matrix."""
    cum = np.cumsum(probs, axis=1)
    cum /= cum[:, -1:]
    u = rng.random(len(probs))
    return (cum <= u[:, None]).sum(axis=1)


def simulate_logs(users: list[LatentUser], ads: list[AdSpec], field: SpatialField,
                  config: SimConfig) -> ImpressionLog:
    """Run the market and return the logged impressions with ground truth.

    The click logit for ad a at impression i is
    base_logit + match_weight * <omega_i, match_vector_a>
    + field(lat_i, lon_i) * geo_weight_a
    + influence_strength * decayed_recent_click_count(a, region_i, t_i).
    The shown ad is drawn from the quasi-proportional allocation over the
    eligible set; the exact allocation probability and the exact click
    probability of every ad are recorded in the ground-truth sidecar.
    """
    n_ads = len(ads)
    arr_rng = substream(config.seed, "arrivals")
    alloc_rng = substream(config.seed, "allocation")
    click_rng = substream(config.seed, "clicks")

    user_idx, t, lat, lon, app = _draw_arrivals(users, config, arr_rng)
    n = len(t)
    hour = ((t // 3600.0) % 24).astype(int)
    minute = ((t // 60.0) % 60).astype(int)
    region = region_ids_of(lat, lon, config)
    city = city_ids_of(lat, lon, config)

    elig = _eligibility_matrix(ads, region, hour, app)
    bq = np.array([ad.bid * ad.quality for ad in ads])
    probs = np.where(elig, bq[None, :], 0.0)
    probs /= probs.sum(axis=1, keepdims=True)
    shown = _allocation(probs, alloc_rng)

    omega = np.stack([u.omega for u in users])
    mvecs = np.stack([ad.match_vector for ad in ads])
    geo_w = np.array([ad.geo_weight for ad in ads])
    match_term = omega @ mvecs.T  # users x ads
    logits = (config.base_logit
              + config.match_weight * match_term[user_idx]
              + field.value(lat, lon)[:, None] * geo_w[None, :])

    u_click = click_rng.random(n)
    if config.influence_strength == 0.0:
        ctr_all = expit(logits)
        click = (u_click < ctr_all[np.arange(n), shown]).astype(int)
    else:
        ctr_all = np.empty((n, n_ads))
        click = np.zeros(n, dtype=int)
        state = _InfluenceState(n_ads, config)
        for i in range(n):
            inf_vec = state.vector(int(region[i]), float(t[i]), n_ads)
            ctr_all[i] = expit(logits[i] + config.influence_strength * inf_vec)
            if u_click[i] < ctr_all[i, shown[i]]:
                click[i] = 1
                state.record(int(shown[i]), int(region[i]), float(t[i]))

    bits = np.int64(1) << np.arange(n_ads, dtype=np.int64)
    mask = (elig.astype(np.int64) * bits[None, :]).sum(axis=1)

    rows = pd.DataFrame({
        "impression_id": np.arange(n, dtype=np.int64),
        "user_id": user_idx.astype(np.int64),
        "timestamp_s": t,
        "app_id": app.astype(np.int64),
        "ad_id": shown.astype(np.int64),
        "click": click.astype(np.int64),
        "lat": lat,
        "lon": lon,
        "region_id": region.astype(np.int64),
        "city_id": city.astype(np.int64),
        "brand": np.array([users[i].device_brand for i in user_idx], dtype=np.int64),
        "isp": np.array([users[i].isp for i in user_idx], dtype=np.int64),
        "connectivity": np.array([users[i].connectivity for i in user_idx], dtype=np.int64),
        "hour": hour.astype(np.int64),
        "minute": minute.astype(np.int64),
        "bid": np.array([ads[a].bid for a in shown]),
        "quality": np.array([ads[a].quality for a in shown]),
        "true_propensity": probs[np.arange(n), shown],
        "true_ctr": ctr_all[np.arange(n), shown],
        "eligibility_mask": mask,
    })[IMPRESSION_COLUMNS]

    gt = pd.DataFrame({"impression_id": np.arange(n, dtype=np.int64)})
    for a in range(n_ads):
        gt[f"pi_{a}"] = probs[:, a]
    for a in range(n_ads):
        gt[f"ctr_{a}"] = ctr_all[:, a]

    order = np.lexsort((t, user_idx))
    rows = rows.iloc[order].reset_index(drop=True)
    gt = gt.iloc[order].reset_index(drop=True)
    return ImpressionLog(rows=rows, ground_truth=gt, n_ads=n_ads)


OraclePolicy = Callable[[dict, np.ndarray, np.ndarray], int]


def oracle_policy_value(policy: OraclePolicy, users: list[LatentUser], ads: list[AdSpec],
                        field: SpatialField, config: SimConfig, n_mc: int) -> OracleValue:
    """Ground-truth expected per-impression reward of a policy.

    Simulates a fresh impression stream (its own substream of config.seed)
    and averages the exact click probability of the policy's chosen ad. The
    policy is called as policy(context_dict, eligible_mask, true_ctr_vector)
    and must return an eligible ad id. With influence on, the stream evolves
    under the policy's own choices.
    """
    rng = substream(config.seed, "oracle")
    n_ads = len(ads)
    rates = np.array([u.arrival_rate for u in users])
    user_idx = rng.choice(len(users), size=n_mc, p=rates / rates.sum())
    t = np.sort(rng.uniform(0.0, config.horizon_s, n_mc))
    lat0, lat1, lon0, lon1 = config.bbox
    lat = np.clip(np.array([users[i].home_lat for i in user_idx])
                  + rng.normal(0.0, config.jitter_deg, n_mc), lat0, lat1)
    lon = np.clip(np.array([users[i].home_lon for i in user_idx])
                  + rng.normal(0.0, config.jitter_deg, n_mc), lon0, lon1)
    app = rng.choice(config.n_apps, size=n_mc, p=_zipf_weights(config.n_apps))
    hour = ((t // 3600.0) % 24).astype(int)
    minute = ((t // 60.0) % 60).astype(int)
    region = region_ids_of(lat, lon, config)
    city = city_ids_of(lat, lon, config)

    elig = _eligibility_matrix(ads, region, hour, app)
    omega = np.stack([u.omega for u in users])
    mvecs = np.stack([ad.match_vector for ad in ads])
    geo_w = np.array([ad.geo_weight for ad in ads])
    match_term = omega @ mvecs.T
    logits = (config.base_logit
              + config.match_weight * match_term[user_idx]
              + field.value(lat, lon)[:, None] * geo_w[None, :])

    u_click = rng.random(n_mc)
    state = _InfluenceState(n_ads, config) if config.influence_strength > 0 else None
    values = np.empty(n_mc)
    for i in range(n_mc):
        row_logits = logits[i]
        if state is not None:
            inf_vec = state.vector(int(region[i]), float(t[i]), n_ads)
            row_logits = row_logits + config.influence_strength * inf_vec
        ctr = expit(row_logits)
        ctx = {
            "user_id": int(user_idx[i]), "timestamp_s": float(t[i]), "app_id": int(app[i]),
            "lat": float(lat[i]), "lon": float(lon[i]), "region_id": int(region[i]),
            "city_id": int(city[i]), "brand": users[user_idx[i]].device_brand,
            "isp": users[user_idx[i]].isp, "connectivity": users[user_idx[i]].connectivity,
            "hour": int(hour[i]), "minute": int(minute[i]),
        }
        a = int(policy(ctx, elig[i], ctr))
        if not elig[i, a]:
            raise IneligibleAction(f"policy chose ad {a}, not eligible at impression {i}")
        values[i] = ctr[a]
        if state is not None and u_click[i] < ctr[a]:
            state.record(a, int(region[i]), float(t[i]))

    value = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    return OracleValue(value=value, mc_se=se, n_mc=n_mc)
