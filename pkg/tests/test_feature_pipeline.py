"""Feature pipeline tests, including an independent strict-past recomputation oracle."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from voilab.errors import InvalidTime, OrderingViolation
from voilab.feature_pipeline import (
    BEHAVIOR_FEATURES,
    CONTEXT_FEATURES,
    GEO_FEATURES,
    BehavioralState,
    Regime,
    assemble_regime,
    behavioral_frame,
    build_regime_matrix,
    build_topk_tables,
    encode_context,
    encode_context_frame,
    regime_features,
    split_users_train_test,
    update_and_emit_behavioral,
)
from voilab.market_sim import SimConfig, sample_market, simulate_logs


def _tables_from(rows: pd.DataFrame, top_k: int = 50):
    return build_topk_tables(rows, top_k=top_k)


def _toy_rows() -> pd.DataFrame:
    return pd.DataFrame({
        "impression_id": np.arange(6),
        "user_id": [0, 0, 0, 1, 1, 0],
        "timestamp_s": [10.0, 40.0, 90.0, 20.0, 50.0, 130.0],
        "app_id": [1, 1, 2, 1, 1, 1],
        "ad_id": [0, 0, 1, 0, 1, 0],
        "click": [1, 0, 1, 0, 0, 0],
        "lat": 31.0, "lon": 101.0, "region_id": 0, "city_id": 0,
        "brand": 3, "isp": 1, "connectivity": 0,
        "hour": 6, "minute": 0,
    })


class TestEncodeContext:
    def test_hour_six(self):
        t = _tables_from(_toy_rows())
        f = encode_context(6, 0, 3, 1, 1, 0, t)
        assert f["hour_sin"] == pytest.approx(1.0, abs=1e-12)
        assert f["hour_cos"] == pytest.approx(0.0, abs=1e-12)

    def test_zero_phase(self):
        t = _tables_from(_toy_rows())
        f = encode_context(0, 0, 3, 1, 1, 0, t)
        assert (f["hour_sin"], f["hour_cos"]) == (0.0, 1.0)
        assert (f["minute_sin"], f["minute_cos"]) == (0.0, 1.0)

    def test_rare_category_maps_to_zero(self):
        rows = _toy_rows()
        t = build_topk_tables(rows, top_k=1)
        # brand 3 is the only brand, so it takes rank 1; unseen brand 9 -> 0
        assert encode_context(1, 2, 9, 1, 1, 0, t)["brand_code"] == 0.0
        assert encode_context(1, 2, 3, 1, 1, 0, t)["brand_code"] == 1.0

    def test_invalid_time(self):
        t = _tables_from(_toy_rows())
        with pytest.raises(InvalidTime):
            encode_context(24, 0, 3, 1, 1, 0, t)
        with pytest.raises(InvalidTime):
            encode_context(0, -1, 3, 1, 1, 0, t)
        bad = _toy_rows().assign(hour=25)
        with pytest.raises(InvalidTime):
            encode_context_frame(bad, t)

    def test_rank_order_and_tie_break(self):
        rows = pd.DataFrame({
            "brand": [5, 5, 5, 2, 2, 7], "app_id": 0, "isp": 0, "connectivity": 0,
        })
        t = build_topk_tables(rows, top_k=2)
        assert t.code("brand", 5) == 1     # most frequent
        assert t.code("brand", 2) == 2
        assert t.code("brand", 7) == 0     # beyond top 2
        # tie between 2 and 7 broken toward the smaller raw value
        rows2 = pd.DataFrame({
            "brand": [5, 5, 2, 7], "app_id": 0, "isp": 0, "connectivity": 0,
        })
        t2 = build_topk_tables(rows2, top_k=2)
        assert t2.code("brand", 2) == 2 and t2.code("brand", 7) == 0


class TestBehavioralState:
    def test_fourth_impression_ec(self):
        state = BehavioralState()
        feats = None
        for i in range(4):
            row = dict(user_id=0, timestamp_s=float(i), app_id=0, ad_id=0, click=0)
            feats = update_and_emit_behavioral(state, row)
        assert feats["exposure_count"] == 3.0

    def test_sctr_direct_ratio(self):
        state = BehavioralState()
        clicks = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
        for i, c in enumerate(clicks):
            update_and_emit_behavioral(
                state, dict(user_id=0, timestamp_s=float(i), app_id=0, ad_id=0, click=c))
        f = state.emit(0, 10.0, 0, 0)
        assert f["session_ctr"] == pytest.approx(0.3)
        assert f["click_history"] == 3.0

    def test_first_impression_sentinels(self):
        state = BehavioralState()
        f = state.emit(7, 100.0, 0, 0)
        assert f["exposure_count"] == 0.0
        assert f["click_history"] == 0.0
        assert f["session_ctr"] == 0.0
        assert f["time_since_exposure"] == -1.0
        assert f["time_since_click"] == -1.0
        assert f["ad_frequency"] == 1.0  # counts the current exposure

    def test_time_gaps(self):
        state = BehavioralState()
        update_and_emit_behavioral(
            state, dict(user_id=0, timestamp_s=10.0, app_id=0, ad_id=0, click=1))
        update_and_emit_behavioral(
            state, dict(user_id=0, timestamp_s=25.0, app_id=0, ad_id=0, click=0))
        f = state.emit(0, 40.0, 0, 0)
        assert f["time_since_exposure"] == 15.0
        assert f["time_since_click"] == 30.0

    def test_ordering_violation(self):
        state = BehavioralState()
        state.update(0, 50.0, 0, 0, 0)
        with pytest.raises(OrderingViolation):
            state.update(0, 49.0, 0, 0, 0)
        # a different user's clock is independent
        state.update(1, 1.0, 0, 0, 0)


def _oracle_behavioral(rows: pd.DataFrame) -> pd.DataFrame:
    """Independent strict-past recomputation using pandas cumulatives."""
    df = rows.sort_values("impression_id").reset_index(drop=True)
    u, ad, app, y, t = df["user_id"], df["ad_id"], df["app_id"], df["click"], df["timestamp_s"]

    def safe(num, den):
        num, den = np.asarray(num, float), np.asarray(den, float)
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    ec = df.groupby("user_id").cumcount().to_numpy()
    ch = (df.groupby("user_id")["click"].cumsum() - y).to_numpy()
    tse = (t - t.groupby(u).shift(1)).fillna(-1.0).to_numpy()
    click_t = t.where(y == 1)
    lct = click_t.groupby(u, group_keys=False).apply(lambda s: s.shift(1).ffill())
    tce = (t - lct).fillna(-1.0).to_numpy()
    ua_prior = df.groupby(["user_id", "ad_id"]).cumcount().to_numpy()
    ua_click = (df.groupby(["user_id", "ad_id"])["click"].cumsum() - y).to_numpy()
    ad_prior = df.groupby("ad_id").cumcount().to_numpy()
    ad_click = (df.groupby("ad_id")["click"].cumsum() - y).to_numpy()
    uapp_prior = df.groupby(["user_id", "app_id"]).cumcount().to_numpy()
    uapp_click = (df.groupby(["user_id", "app_id"])["click"].cumsum() - y).to_numpy()
    uaa_prior = df.groupby(["user_id", "app_id", "ad_id"]).cumcount().to_numpy()
    uaa_click = (df.groupby(["user_id", "app_id", "ad_id"])["click"].cumsum() - y).to_numpy()
    app_prior = df.groupby("app_id").cumcount().to_numpy()
    app_click = (df.groupby("app_id")["click"].cumsum() - y).to_numpy()
    tot_prior = np.arange(len(df))
    tot_click = (y.cumsum() - y).to_numpy()

    out = pd.DataFrame({
        "exposure_count": ec.astype(float),
        "click_history": ch.astype(float),
        "session_ctr": safe(ch, ec),
        "time_since_exposure": tse,
        "time_since_click": tce,
        "ad_frequency": (ua_prior + 1).astype(float),
        "user_ad_ctr": safe(ua_click, ua_prior),
        "ad_ctr_overall": safe(ad_click, ad_prior),
        "app_usage_share": safe(uapp_prior, ec),
        "app_click_share": safe(uapp_click, ch),
        "app_ad_usage_share": safe(uaa_prior, ua_prior),
        "app_ad_click_share": safe(uaa_click, ua_click),
        "app_usage_share_overall": safe(app_prior, tot_prior),
        "app_click_share_overall": safe(app_click, tot_click),
    })
    out.index = df.index
    back = out.copy()
    back["impression_id"] = df["impression_id"].to_numpy()
    back = back.set_index("impression_id").loc[rows["impression_id"].to_numpy()]
    return back.reset_index(drop=True)


@pytest.fixture(scope="module")
def sim_log():
    cfg = SimConfig(n_users=120, n_ads=4, n_apps=4, horizon_hours=48.0,
                    base_logit=-1.5, match_weight=0.8, seed=31)
    log = simulate_logs(*sample_market(cfg), cfg)
    assert len(log) >= 5000
    return log


class TestNoLookahead:
    def test_matches_prefix_oracle_everywhere(self, sim_log):
        got = behavioral_frame(sim_log.rows)
        want = _oracle_behavioral(sim_log.rows)
        for name in BEHAVIOR_FEATURES:
            np.testing.assert_array_equal(got[name].to_numpy(), want[name].to_numpy(),
                                          err_msg=name)

    def test_literal_prefix_replay(self, sim_log):
        rows = sim_log.rows.sort_values("impression_id").reset_index(drop=True)
        got = behavioral_frame(rows)
        rng = np.random.default_rng(0)
        for i in rng.choice(len(rows), size=40, replace=False):
            state = BehavioralState()
            for k in range(i):
                r = rows.iloc[k]
                state.update(int(r["user_id"]), float(r["timestamp_s"]),
                             int(r["app_id"]), int(r["ad_id"]), int(r["click"]))
            r = rows.iloc[i]
            feats = state.emit(int(r["user_id"]), float(r["timestamp_s"]),
                               int(r["app_id"]), int(r["ad_id"]))
            for name in BEHAVIOR_FEATURES:
                assert got[name].iloc[i] == feats[name], name

    def test_monotonicity_and_ranges(self, sim_log):
        frame = behavioral_frame(sim_log.rows)
        joined = pd.concat([sim_log.rows[["user_id", "timestamp_s"]], frame], axis=1)
        for _, grp in joined.groupby("user_id"):
            g = grp.sort_values("timestamp_s")
            assert (np.diff(g["exposure_count"].to_numpy()) == 1.0).all()
            assert (np.diff(g["click_history"].to_numpy()) >= 0.0).all()
        for name in ["session_ctr", "user_ad_ctr", "ad_ctr_overall", "app_usage_share",
                     "app_click_share", "app_ad_usage_share", "app_ad_click_share",
                     "app_usage_share_overall", "app_click_share_overall"]:
            v = frame[name].to_numpy()
            assert (v >= 0.0).all() and (v <= 1.0).all(), name

    def test_ad_override_touches_only_ad_features(self, sim_log):
        rows = sim_log.rows
        base = behavioral_frame(rows)
        over = behavioral_frame(rows, ad_override=0)
        ad_free = ["exposure_count", "click_history", "session_ctr", "time_since_exposure",
                   "time_since_click", "app_usage_share", "app_click_share",
                   "app_usage_share_overall", "app_click_share_overall"]
        for name in ad_free:
            np.testing.assert_array_equal(base[name].to_numpy(), over[name].to_numpy())
        shown0 = rows["ad_id"].to_numpy() == 0
        for name in ["ad_frequency", "user_ad_ctr", "ad_ctr_overall",
                     "app_ad_usage_share", "app_ad_click_share"]:
            np.testing.assert_array_equal(base[name].to_numpy()[shown0],
                                          over[name].to_numpy()[shown0])


class TestAssembleRegime:
    def test_context_only_excludes_geo_and_behavior(self):
        feats = regime_features(Regime.CONTEXT_ONLY)
        assert not set(feats) & set(GEO_FEATURES)
        assert not set(feats) & set(BEHAVIOR_FEATURES)

    def test_inclusion_exclusion(self):
        n_geo = len(regime_features(Regime.GEO))
        n_beh = len(regime_features(Regime.BEHAVIOR))
        n_ctx = len(regime_features(Regime.CONTEXT_ONLY))
        assert len(regime_features(Regime.GEO_BEHAVIOR)) == n_geo + n_beh - n_ctx

    def test_row_level_assembly_matches_frame(self):
        rows = _toy_rows()
        tables = _tables_from(rows)
        mat = build_regime_matrix(rows, Regime.GEO_BEHAVIOR, tables)
        ctx = encode_context_frame(rows, tables)
        beh = behavioral_frame(rows)
        r = rows.iloc[2]
        vec = assemble_regime(
            r.to_dict(),
            ctx.iloc[2].to_dict(),
            {"lat": r["lat"], "lon": r["lon"], "region_code": float(r["region_id"]),
             "city_code": float(r["city_id"])},
            beh.iloc[2].to_dict(),
            Regime.GEO_BEHAVIOR,
        )
        for name in regime_features(Regime.GEO_BEHAVIOR):
            assert vec[name] == mat.frame[name].iloc[2], name

    def test_geo_slice_identical_across_regimes(self):
        cfg = SimConfig(n_users=40, n_ads=3, seed=8)
        log = simulate_logs(*sample_market(cfg), cfg)
        tables = _tables_from(log.rows)
        m_geo = build_regime_matrix(log.rows, Regime.GEO, tables)
        m_gb = build_regime_matrix(log.rows, Regime.GEO_BEHAVIOR, tables)
        for name in GEO_FEATURES:
            np.testing.assert_array_equal(m_geo.frame[name].to_numpy(),
                                          m_gb.frame[name].to_numpy())

    def test_no_nan_or_inf(self):
        cfg = SimConfig(n_users=50, n_ads=3, seed=12)
        log = simulate_logs(*sample_market(cfg), cfg)
        tables = _tables_from(log.rows)
        for regime in Regime:
            X = build_regime_matrix(log.rows, regime, tables).X()
            assert np.isfinite(X).all(), regime


class TestSplit:
    def test_partition_is_user_level(self):
        cfg = SimConfig(n_users=10, n_ads=2, seed=6)
        log = simulate_logs(*sample_market(cfg), cfg)
        train, test = split_users_train_test(log, 0.6, seed=5)
        assert len(train) + len(test) == len(log.rows)
        tr_users = set(train["user_id"])
        te_users = set(test["user_id"])
        assert not tr_users & te_users
        assert tr_users | te_users == set(log.rows["user_id"])

    def test_full_train_limit(self):
        rows = _toy_rows()[_toy_rows()["user_id"] == 0]
        train, test = split_users_train_test(rows, 1.0, seed=0)
        assert len(train) == len(rows) and len(test) == 0

    def test_deterministic(self):
        cfg = SimConfig(n_users=30, n_ads=2, seed=2)
        log = simulate_logs(*sample_market(cfg), cfg)
        t1, _ = split_users_train_test(log, 0.5, seed=77)
        t2, _ = split_users_train_test(log, 0.5, seed=77)
        assert (t1["impression_id"].to_numpy() == t2["impression_id"].to_numpy()).all()

    def test_expected_share(self):
        rows = pd.DataFrame({
            "impression_id": np.arange(4000), "user_id": np.arange(4000),
        })
        train, test = split_users_train_test(rows, 0.7, seed=3)
        share = len(train) / 4000
        assert abs(share - 0.7) < 3 * np.sqrt(0.7 * 0.3 / 4000)
