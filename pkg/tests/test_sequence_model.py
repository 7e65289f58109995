"""Tests for the LSTM + causal-attention click model.

The gradient tests treat central finite differences as the oracle; the
counterfactual-scoring tests treat a brute-force full re-forward with one
step's inputs spliced in as the oracle.
"""

import numpy as np
import pytest
from scipy.special import expit

from voilab.errors import DimensionError, InvalidTimeGap, LabelError
from voilab.feature_pipeline import Regime, build_regime_matrix, build_topk_tables
from voilab.market_sim import SimConfig, sample_market, simulate_logs
from voilab.reward_models import (
    LearnerConfig,
    LearnerKind,
    SequenceModel,
    auc_score,
    build_sequence_dataset,
    build_sequence_spec,
    causal_attention_forward,
    gradient_check,
    lstm_cell_step,
)


def _gates(H, d, rng=None, scale=0.3):
    if rng is None:
        out = {f"W{g}": np.zeros((H, H + d)) for g in "fico"}
    else:
        out = {f"W{g}": rng.normal(0, scale, (H, H + d)) for g in "fico"}
    out.update({f"b{g}": np.zeros(H) for g in "fico"})
    return out


class TestLstmCell:
    def test_zero_parameters_give_zero_state(self):
        H, d = 4, 3
        h, C = lstm_cell_step(np.ones(d), np.zeros(H), np.zeros(H), _gates(H, d))
        # f=i=o=1/2 and the tanh candidate of 0 is 0, so C and h stay 0
        np.testing.assert_array_equal(C, np.zeros(H))
        np.testing.assert_array_equal(h, np.zeros(H))

    def test_saturated_gates_copy_cell_state(self):
        H, d = 5, 2
        rng = np.random.default_rng(0)
        gates = _gates(H, d, rng)
        gates["bf"] = np.full(H, 30.0)   # forget gate pinned open
        gates["bi"] = np.full(H, -30.0)  # input gate pinned shut
        C_prev = rng.normal(0, 1, H)
        _, C = lstm_cell_step(rng.normal(0, 1, d), rng.normal(0, 1, H), C_prev, gates)
        np.testing.assert_allclose(C, C_prev, atol=1e-9)

    def test_matches_scalar_recomputation(self):
        H, d = 3, 2
        rng = np.random.default_rng(7)
        gates = {f"W{g}": rng.normal(0, 0.5, (H, H + d)) for g in "fico"}
        gates.update({f"b{g}": rng.normal(0, 0.5, H) for g in "fico"})
        x, h_prev, C_prev = rng.normal(0, 1, d), rng.normal(0, 1, H), rng.normal(0, 1, H)
        h, C = lstm_cell_step(x, h_prev, C_prev, gates)
        z = np.concatenate([h_prev, x])
        for r in range(H):
            f = 1 / (1 + np.exp(-(gates["Wf"][r] @ z + gates["bf"][r])))
            i = 1 / (1 + np.exp(-(gates["Wi"][r] @ z + gates["bi"][r])))
            c = np.tanh(gates["Wc"][r] @ z + gates["bc"][r])
            o = 1 / (1 + np.exp(-(gates["Wo"][r] @ z + gates["bo"][r])))
            C_r = f * C_prev[r] + i * c
            assert abs(C[r] - C_r) < 1e-12
            assert abs(h[r] - o * np.tanh(C_r)) < 1e-12

    def test_dimension_mismatch_raises(self):
        with pytest.raises(DimensionError):
            lstm_cell_step(np.ones(3), np.zeros(4), np.zeros(5), _gates(4, 3))
        bad = _gates(4, 3)
        bad["Wi"] = np.zeros((4, 9))
        with pytest.raises(DimensionError):
            lstm_cell_step(np.ones(3), np.zeros(4), np.zeros(4), bad)


def _attn_params(H, rng=None):
    p = {}
    for nm in ("q", "k", "v", "o"):
        p[f"attn_W{nm}"] = np.eye(H) if rng is None else rng.normal(0, 0.4, (H, H))
        p[f"attn_b{nm}"] = np.zeros(H)
    return p


class TestCausalAttention:
    def test_first_step_attends_only_to_itself(self):
        H, T = 4, 3
        rng = np.random.default_rng(1)
        h = rng.normal(0, 1, (T, H))
        _, w = causal_attention_forward(h, _attn_params(H, rng), np.ones(T, bool),
                                        heads=2, return_weights=True)
        np.testing.assert_allclose(w[:, 0, :], np.tile([1.0, 0.0, 0.0], (2, 1)), atol=1e-12)

    def test_identical_keys_give_uniform_weights(self):
        H, T = 4, 5
        h = np.tile(np.array([0.3, -1.2, 0.7, 0.1]), (T, 1))
        _, w = causal_attention_forward(h, _attn_params(H, np.random.default_rng(2)),
                                        np.ones(T, bool), heads=2, return_weights=True)
        for t in range(T):
            np.testing.assert_allclose(w[:, t, : t + 1], 1.0 / (t + 1), atol=1e-12)
            np.testing.assert_allclose(w[:, t, t + 1:], 0.0, atol=0)

    def test_rows_sum_to_one_and_padding_is_zeroed(self):
        H, T = 6, 7
        rng = np.random.default_rng(3)
        h = rng.normal(0, 1, (T, H))
        mask = np.array([True] * 5 + [False] * 2)
        out, w = causal_attention_forward(h, _attn_params(H, rng), mask,
                                          heads=3, return_weights=True)
        np.testing.assert_allclose(w[:, :5, :].sum(-1), 1.0, atol=1e-10)
        # padded queries see no keys and must emit exactly zero
        np.testing.assert_array_equal(out[5:], 0.0)
        assert np.all(w[:, :, 5:] == 0.0)

    def test_causal_mask_blocks_future(self):
        H, T = 4, 6
        rng = np.random.default_rng(4)
        h = rng.normal(0, 1, (T, H))
        _, w = causal_attention_forward(h, _attn_params(H, rng), np.ones(T, bool),
                                        heads=2, return_weights=True)
        assert np.all(w[:, np.triu_indices(T, k=1)[0], np.triu_indices(T, k=1)[1]] == 0.0)


@pytest.fixture(scope="module")
def small_log():
    cfg = SimConfig(n_users=40, n_ads=3, n_apps=3, horizon_hours=24, seed=5,
                    base_logit=-1.2, match_weight=0.8)
    users, ads, field = sample_market(cfg)
    return simulate_logs(users, ads, field, cfg), cfg


@pytest.fixture(scope="module")
def small_model(small_log):
    log, _ = small_log
    tables = build_topk_tables(log.rows)
    mat = build_regime_matrix(log.rows, Regime.BEHAVIOR, tables)
    spec = build_sequence_spec(mat)
    cfg = LearnerConfig(kind=LearnerKind.SEQUENCE, hidden_size=8, attention_heads=2,
                        window=6, embed_dim=3, dropout_rate=0.1, epochs=2, seed=3)
    ds = build_sequence_dataset(mat, spec, cfg.window)
    return SequenceModel(cfg, spec), ds, mat, tables


class TestDataset:
    def test_windows_cover_every_impression_once(self, small_log, small_model):
        log, _ = small_log
        _, ds, _, _ = small_model
        got = np.sort(ds.impression_id[ds.mask])
        np.testing.assert_array_equal(got, np.sort(log.rows["impression_id"].to_numpy()))

    def test_gaps_match_user_timelines(self, small_log, small_model):
        log, _ = small_log
        _, ds, _, _ = small_model
        rows = log.rows.sort_values(["user_id", "timestamp_s"])
        expect = rows.groupby("user_id")["timestamp_s"].diff().fillna(0.0).to_numpy()
        imp_order = rows["impression_id"].to_numpy()
        flat = dict(zip(ds.impression_id[ds.mask], ds.dt[ds.mask]))
        np.testing.assert_allclose([flat[i] for i in imp_order], expect, atol=1e-12)

    def test_negative_gap_raises(self, small_model):
        model, ds, _, _ = small_model
        broken = ds.take(3)
        broken.dt = broken.dt.copy()
        broken.dt[0, 1] = -4.0
        with pytest.raises(InvalidTimeGap):
            model.forward(broken)

    def test_non_binary_labels_raise(self, small_model):
        model, ds, _, _ = small_model
        bad = ds.take(2)
        bad.y = bad.y.copy()
        bad.y[0, 0] = 0.5
        with pytest.raises(LabelError):
            SequenceModel(model.config, model.spec).fit(bad)


class TestForward:
    def test_probabilities_strictly_inside_unit_interval(self, small_model):
        model, ds, _, _ = small_model
        probs = model.predict(ds)
        assert np.all(probs > 0.0) and np.all(probs < 1.0)

    def test_batch_order_has_no_effect(self, small_model):
        model, ds, _, _ = small_model
        perm = np.random.default_rng(9).permutation(len(ds))
        probs = model.predict(ds)
        probs_perm = model.predict(ds.select(perm))
        np.testing.assert_array_equal(probs_perm, probs[perm])

    def test_prediction_at_t_ignores_later_steps(self, small_model):
        """Perturbing inputs after step t leaves predictions up to t bit-identical."""
        model, ds, _, _ = small_model
        base = model.predict(ds)
        t = 3
        messed = ds.take(len(ds))
        messed.X_num = ds.X_num.copy()
        messed.X_num[:, t + 1:, :] += 13.0
        after = model.predict(messed)
        np.testing.assert_array_equal(after[:, : t + 1], base[:, : t + 1])

    def test_truncation_preserves_prefix(self, small_model):
        """Scoring a truncated window reproduces the prefix predictions."""
        model, ds, _, _ = small_model
        full = ds.take(8)
        base = model.predict(full)
        t = 4
        trunc = ds.take(8)
        trunc.mask = full.mask.copy()
        trunc.mask[:, t:] = False
        got = model.predict(trunc)
        keep = full.mask[:, :t]
        np.testing.assert_allclose(got[:, :t][keep], base[:, :t][keep], atol=1e-10)


class TestGradients:
    def test_full_model_matches_finite_differences(self, small_model):
        model, ds, _, _ = small_model
        err = gradient_check(model, ds.take(4), coords_per_tensor=6, seed=1)
        assert err < 1e-4

    def test_readout_only_is_near_exact(self, small_model):
        model, ds, _, _ = small_model
        err = gradient_check(model, ds.take(4), param_names=["out_w", "out_b"],
                             coords_per_tensor=9)
        assert err < 1e-7

    def test_corrupted_gate_gradient_fails_the_check(self, small_model):
        model, ds, _, _ = small_model
        for gate in ("lstm0_Wf", "lstm0_Wc"):
            err = gradient_check(model, ds.take(4), coords_per_tensor=6, seed=1,
                                 corrupt_param=gate, corrupt_scale=1.1)
            assert err > 1e-3


class TestCounterfactualScoring:
    def _candidates(self, rows, tables, spec, window, n_ads):
        out = {}
        for a in range(n_ads):
            mat_a = build_regime_matrix(rows, Regime.BEHAVIOR, tables, ad_override=a)
            out[a] = build_sequence_dataset(mat_a, spec, window, ad_override=a)
        return out

    def test_logged_candidate_reproduces_forward(self, small_log, small_model):
        log, sim_cfg = small_log
        model, ds, mat, tables = small_model
        cands = self._candidates(log.rows, tables, model.spec,
                                 model.config.window, sim_cfg.n_ads)
        imp, flat = model.score_logged(ds)
        imp2, scores, ad_ids = model.score_candidates(ds, cands)
        np.testing.assert_array_equal(imp, imp2)
        logged_ad = log.rows.set_index("impression_id").loc[imp, "ad_id"].to_numpy()
        picked = scores[np.arange(len(imp)), [ad_ids.index(a) for a in logged_ad]]
        np.testing.assert_allclose(picked, flat, atol=1e-12)

    def test_swap_matches_bruteforce_splice(self, small_log, small_model):
        """Cached single-step swap equals a full forward with the row replaced."""
        log, sim_cfg = small_log
        model, ds, mat, tables = small_model
        cands = self._candidates(log.rows, tables, model.spec,
                                 model.config.window, sim_cfg.n_ads)
        imp, scores, ad_ids = model.score_candidates(ds, cands)
        pos = {}
        for w in range(len(ds)):
            for t in range(model.config.window):
                if ds.mask[w, t]:
                    pos[ds.impression_id[w, t]] = (w, t)
        rng = np.random.default_rng(11)
        flat_idx = rng.choice(len(imp), size=12, replace=False)
        for fi in flat_idx:
            w, t = pos[imp[fi]]
            for a in ad_ids:
                spliced = ds.take(len(ds))
                spliced.X_num = ds.X_num.copy()
                spliced.codes = ds.codes.copy()
                spliced.X_num[w, t] = cands[a].X_num[w, t]
                spliced.codes[w, t] = cands[a].codes[w, t]
                brute = model.predict(spliced)[w, t]
                assert abs(scores[fi, ad_ids.index(a)] - brute) < 1e-10


class TestTraining:
    def test_loss_decreases_and_model_finds_behavioral_signal(self):
        """On sequences whose CTR rises with past clicks, held-out AUC beats 0.6."""
        rng = np.random.default_rng(17)
        n_users, steps = 200, 24
        recs = []
        imp = 0
        for u in range(n_users):
            t0 = rng.uniform(0, 3600)
            clicks = 0
            for s in range(steps):
                p = expit(-2.5 + 1.4 * min(clicks, 3))
                y = int(rng.random() < p)
                recs.append((imp, u, t0 + 600.0 * s, y, clicks))
                clicks += y
                imp += 1
        import pandas as pd

        frame = pd.DataFrame(recs, columns=["impression_id", "user_id", "timestamp_s",
                                            "click", "prior_clicks"])
        frame["ad_id"] = 0
        from voilab.feature_pipeline import RegimeMatrix

        mat = RegimeMatrix(regime=Regime.BEHAVIOR, frame=frame,
                           feature_names=["prior_clicks"], categorical=[])
        spec = build_sequence_spec(mat, include_ad_code=False)
        cfg = LearnerConfig(kind=LearnerKind.SEQUENCE, hidden_size=12, attention_heads=2,
                            window=12, embed_dim=2, dropout_rate=0.0, epochs=8,
                            learning_rate=0.02, seed=4, batch_size=64)
        train_users = frame["user_id"] < 150
        ds_tr = build_sequence_dataset(
            RegimeMatrix(Regime.BEHAVIOR, frame[train_users], ["prior_clicks"], []),
            spec, cfg.window)
        ds_te = build_sequence_dataset(
            RegimeMatrix(Regime.BEHAVIOR, frame[~train_users], ["prior_clicks"], []),
            spec, cfg.window)
        model = SequenceModel(cfg, spec)
        history = model.fit(ds_tr)
        assert history[-1] < history[0]
        probs = model.predict(ds_te)
        auc = auc_score(probs[ds_te.mask], ds_te.y[ds_te.mask].astype(int))
        assert auc > 0.6

    def test_epoch_history_is_nonincreasing_smoothed(self, small_model):
        model, ds, _, _ = small_model
        fresh = SequenceModel(model.config, model.spec)
        history = fresh.fit(ds)
        assert len(history) == model.config.epochs
        assert history[-1] <= history[0]

    def test_training_is_deterministic_given_seed(self, small_model):
        model, ds, _, _ = small_model
        m1 = SequenceModel(model.config, model.spec)
        m1.fit(ds.take(32))
        m2 = SequenceModel(model.config, model.spec)
        m2.fit(ds.take(32))
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k], m2.params[k])
