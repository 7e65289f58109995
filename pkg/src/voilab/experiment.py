"""End-to-end experiment runner: one JSON config in, a directory of tables out.

Stages: simulate a market, build features, fit one reward model per
information regime, estimate logging propensities, evaluate the induced
greedy policies by inverse-propensity scoring, run the complement/substitute
tests (aggregate and by impression depth), run the residual spatial
autocorrelation report, and emit descriptive curves. Every stage draws its
randomness from the single master seed through named substreams, so a rerun
with the same config reproduces every output byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import __version__
from .feature_pipeline import (
    Regime,
    behavioral_frame,
    build_regime_matrix,
    build_topk_tables,
    split_users_train_test,
)
from .market_sim import ImpressionLog, SimConfig, sample_market, simulate_logs
from .policy_eval import induce_greedy_policy, ips_estimate
from .propensity import balance_report, build_eligibility, cross_fit_propensities
from .reward_models import LearnerConfig, LearnerKind, train_learner
from .reward_models.metrics import evaluate_predictions
from .reward_models.sequence import SequenceModel, build_sequence_dataset
from .spatial_stats import Split, rsa_pipeline
from .voi_tests import (
    aggregate_delta_test,
    depth_binned_delta,
    depth_levels_frame,
    depth_table_frame,
    impression_depth,
)

__all__ = [
    "ExperimentConfig",
    "ExperimentReport",
    "Experiment",
    "run_experiment",
    "descriptive_curves",
    "svg_line_plot",
]

ALL_REGIMES = (Regime.CONTEXT_ONLY, Regime.GEO, Regime.BEHAVIOR,
               Regime.GEO_BEHAVIOR)
FLOAT_FORMAT = "%.17g"

logger = logging.getLogger("voilab")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    The master ``seed`` overrides the simulator seed and feeds every
    downstream stage through named substreams; learner seeds are likewise
    pinned to it so paired runs differing in one knob stay stream-aligned.
    """

    sim: SimConfig = field(default_factory=SimConfig)
    out_dir: str = "out"
    seed: int = 0
    train_frac: float = 0.5
    learners: dict[str, LearnerConfig] = field(default_factory=dict)
    n_folds: int = 5
    propensity_l2: float = 1e-4
    balance_covariates: tuple[str, ...] = ("lat", "lon")
    n_bins: int = 10
    n_boot: int = 2000
    n_perm: int = 9999
    rsa_region_keys: tuple[str, ...] = ("region_id",)
    rsa_splits: tuple[Split, ...] = (Split.ALL, Split.SPARSE, Split.RICH)
    rsa_min_impressions: int = 10
    rsa_min_regions: int = 10

    def learner_for(self, regime: Regime) -> LearnerConfig:
        base = self.learners.get(regime.value, LearnerConfig())
        return replace(base, seed=self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sim"] = self.sim.to_dict()
        d["learners"] = {k: _learner_dict(v) for k, v in self.learners.items()}
        d["rsa_splits"] = [s.value for s in self.rsa_splits]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "sim" in d:
            d["sim"] = SimConfig.from_dict(d["sim"])
        if "learners" in d:
            d["learners"] = {k: _learner_from_dict(v)
                             for k, v in d["learners"].items()}
        if "rsa_splits" in d:
            d["rsa_splits"] = tuple(Split(s) for s in d["rsa_splits"])
        for key in ("balance_covariates", "rsa_region_keys"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("out_dir")  # the same experiment may land anywhere
        canonical = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


def _learner_dict(config: LearnerConfig) -> dict:
    d = dataclasses.asdict(config)
    d["kind"] = config.kind.value
    return d


def _learner_from_dict(d: dict) -> LearnerConfig:
    d = dict(d)
    if "kind" in d:
        d["kind"] = LearnerKind(d["kind"])
    return LearnerConfig(**d)


@dataclass
class ExperimentReport:
    """In-memory copy of everything written to the output directory."""

    config_hash: str
    seed: int
    version: str
    status: str
    tables: dict[str, pd.DataFrame]
    files: dict[str, str]  # relative path -> sha256 of the written bytes


def descriptive_curves(rows: pd.DataFrame) -> dict[str, pd.DataFrame]:
    """Concentration, persistence, and per-region CTR summaries of a log.

    Concentration: impressions ordered early-to-late by their position in
    each user's history; cumulative click share against cumulative
    impression share (the diagonal means clicks are uniform over depth).
    Persistence: click rate on the next impression given the number of
    clicks accumulated so far; each user's final impression has no next
    impression and is excluded.
    """
    if len(rows) == 0:
        raise ValueError("log is empty")
    depth = impression_depth(rows)
    clicks = rows["click"].to_numpy()

    by_depth = pd.DataFrame({"depth": depth, "click": clicks}) \
        .groupby("depth").agg(impressions=("click", "size"),
                              clicks=("click", "sum")).reset_index()
    conc = by_depth.copy()
    conc["cum_impression_share"] = conc["impressions"].cumsum() / conc["impressions"].sum()
    conc["cum_click_share"] = conc["clicks"].cumsum() / max(conc["clicks"].sum(), 1)

    order = np.lexsort((rows["timestamp_s"].to_numpy(), rows["user_id"].to_numpy()))
    u = rows["user_id"].to_numpy()[order]
    c = clicks[order].astype(int)
    cum = pd.Series(c).groupby(u).cumsum().to_numpy()
    has_next = np.concatenate([u[1:] == u[:-1], [False]])
    next_click = np.concatenate([c[1:], [0]])
    pers = pd.DataFrame({"prior_clicks": cum[has_next],
                         "next_click": next_click[has_next]}) \
        .groupby("prior_clicks").agg(n=("next_click", "size"),
                                     next_ctr=("next_click", "mean")).reset_index()

    region = rows.groupby("region_id").agg(
        impressions=("click", "size"), clicks=("click", "sum")).reset_index()
    region["ctr"] = region["clicks"] / region["impressions"]
    return {"concentration": conc, "persistence": pers, "region_ctr": region}


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")


def svg_line_plot(path: str, curves: list[tuple[np.ndarray, np.ndarray, str]],
                  title: str, xlabel: str, ylabel: str,
                  size: tuple[int, int] = (640, 420)) -> None:
    """Write a minimal standalone SVG line chart (no plotting dependency)."""
    width, height = size
    left, right, top, bottom = 64, 16, 36, 48
    xs = np.concatenate([np.asarray(c[0], dtype=float) for c in curves])
    ys = np.concatenate([np.asarray(c[1], dtype=float) for c in curves])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x: float) -> float:
        return left + (x - x0) / (x1 - x0) * (width - left - right)

    def py(y: float) -> float:
        return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" '
        f'y2="{height - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" '
        f'stroke="black"/>',
        f'<text x="{(left + width - right) / 2:.1f}" y="{height - 12}" '
        f'text-anchor="middle" font-family="sans-serif" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{(top + height - bottom) / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {(top + height - bottom) / 2:.1f})">{ylabel}</text>',
    ]
    for tick in (x0, (x0 + x1) / 2, x1):
        parts.append(f'<text x="{px(tick):.1f}" y="{height - bottom + 16}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{tick:.4g}</text>')
    for tick in (y0, (y0 + y1) / 2, y1):
        parts.append(f'<text x="{left - 6}" y="{py(tick) + 3:.1f}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{tick:.4g}</text>')
    for i, (x, y, label) in enumerate(curves):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{px(float(a)):.2f},{py(float(b)):.2f}"
                       for a, b in zip(np.asarray(x), np.asarray(y)))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{width - right - 4}" y="{top + 14 * (i + 1)}" '
                     f'text-anchor="end" font-family="sans-serif" font-size="11" '
                     f'fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


class Experiment:
    """Caches pipeline stages so CLI subcommands can share one code path.

    Model fits are deterministic given the config, so stages launched in a
    fresh process recompute upstream pieces in memory rather than loading
    serialized models; the simulated log is the on-disk interchange format.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.sim_config = replace(config.sim, seed=config.seed)
        self._cache: dict[str, object] = {}
        os.makedirs(config.out_dir, exist_ok=True)
        self.written: dict[str, str] = {}
        self.tables: dict[str, pd.DataFrame] = {}

    # --- helpers -------------------------------------------------------

    def _path(self, name: str) -> str:
        return os.path.join(self.config.out_dir, name)

    def _write_csv(self, name: str, frame: pd.DataFrame) -> None:
        frame.to_csv(self._path(name), index=False, float_format=FLOAT_FORMAT)
        self._register(name)
        self.tables[name] = frame

    def _write_json(self, name: str, payload: dict) -> None:
        with open(self._path(name), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if name != "report.json":  # the index lists artifacts, not itself
            self._register(name)

    def _register(self, name: str) -> None:
        with open(self._path(name), "rb") as fh:
            self.written[name] = hashlib.sha256(fh.read()).hexdigest()

    def _get(self, key: str, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    # --- cached pipeline pieces ---------------------------------------

    @property
    def market(self):
        return self._get("market", lambda: sample_market(self.sim_config))

    @property
    def log(self) -> ImpressionLog:
        def build():
            rows_path = self._path("log.csv")
            truth_path = self._path("ground_truth.csv")
            if os.path.exists(rows_path) and os.path.exists(truth_path):
                return ImpressionLog.read_csv(rows_path, truth_path)
            users, ads, fld = self.market
            return simulate_logs(users, ads, fld, self.sim_config)
        return self._get("log", build)

    @property
    def split(self) -> tuple[pd.DataFrame, pd.DataFrame]:
        return self._get("split", lambda: split_users_train_test(
            self.log.rows, self.config.train_frac, seed=self.config.seed))

    @property
    def tables_topk(self):
        return self._get("topk", lambda: build_topk_tables(self.split[0]))

    def _behavioral(self, which: str) -> pd.DataFrame:
        rows = self.split[0] if which == "train" else self.split[1]
        return self._get(f"behavioral-{which}", lambda: behavioral_frame(rows))

    def matrix(self, regime: Regime, which: str):
        rows = self.split[0] if which == "train" else self.split[1]
        behavioral = self._behavioral(which) if regime.has_behavior else None
        return self._get(f"matrix-{regime.value}-{which}",
                         lambda: build_regime_matrix(rows, regime,
                                                     self.tables_topk,
                                                     behavioral=behavioral))

    def learner(self, regime: Regime):
        def build():
            lc = self.config.learner_for(regime)
            data = self.matrix(regime, "train")
            if lc.kind is LearnerKind.SEQUENCE:
                from .reward_models.sequence import build_sequence_spec
                spec = build_sequence_spec(data)
                data = build_sequence_dataset(data, spec, window=lc.window)
            return train_learner(data, lc)
        return self._get(f"learner-{regime.value}", build)

    def predictions(self, regime: Regime, rows: pd.DataFrame | None = None) -> np.ndarray:
        """Predicted CTR of the logged (shown) ad for evaluation rows."""
        learner = self.learner(regime)
        if rows is None:
            matrix = self.matrix(regime, "eval")
        else:
            matrix = build_regime_matrix(rows, regime, self.tables_topk)
        if isinstance(learner, SequenceModel):
            ds = build_sequence_dataset(matrix, learner.spec,
                                        window=learner.config.window)
            imp, probs = learner.score_logged(ds)
            lookup = pd.Series(probs, index=imp)
            return lookup.reindex(matrix.frame["impression_id"]).to_numpy()
        return learner.predict_logged(matrix.frame)

    @property
    def propensities(self):
        def build():
            _, ads, _ = self.market
            eval_rows = self.split[1]
            elig = build_eligibility(eval_rows, ads, strict=True)
            pm = cross_fit_propensities(eval_rows, elig,
                                        n_folds=self.config.n_folds,
                                        l2=self.config.propensity_l2,
                                        seed=self.config.seed)
            return elig, pm
        return self._get("propensities", build)

    def audits(self) -> dict[Regime, pd.DataFrame]:
        def build():
            elig, pm = self.propensities
            eval_rows = self.split[1]
            out = {}
            for regime in ALL_REGIMES:
                policy = induce_greedy_policy(self.learner(regime), regime,
                                              self.tables_topk,
                                              n_ads=self.sim_config.n_ads)
                est, audit = ips_estimate(eval_rows, policy, pm,
                                          eligibility=elig.matrix)
                out[regime] = (est, audit)
            return out
        return self._get("audits", build)

    # --- stages --------------------------------------------------------

    def stage_simulate(self) -> None:
        self.log.to_csv(self._path("log.csv"), self._path("ground_truth.csv"))
        self._register("log.csv")
        self._register("ground_truth.csv")

    def stage_features(self) -> None:
        self.tables_topk.to_json(self._path("topk_tables.json"))
        self._register("topk_tables.json")
        full = behavioral_frame(self.log.rows)
        self._write_csv("features_behavioral.csv", full)

    def stage_train(self) -> None:
        records = []
        for regime in ALL_REGIMES:
            probs = self.predictions(regime)
            labels = self.matrix(regime, "eval").y()
            m = evaluate_predictions(probs, labels)
            records.append({
                "regime": regime.value,
                "n_train": len(self.matrix(regime, "train").frame),
                "n_eval": len(labels),
                "log_loss": m.log_loss, "auc": m.auc, "rig": m.rig,
                "base_rate": float(labels.mean()),
            })
        self._write_csv("metrics.csv", pd.DataFrame(records))

    def stage_propensity(self) -> None:
        _, pm = self.propensities
        pm.to_csv(self._path("propensities.csv"))
        self._register("propensities.csv")
        report = balance_report(self.split[1], pm,
                                list(self.config.balance_covariates))
        report.to_json(self._path("balance.json"))
        self._register("balance.json")

    def stage_evaluate(self) -> None:
        elig, pm = self.propensities
        eval_rows = self.split[1]
        logging_est, _ = ips_estimate(eval_rows, None, pm)
        records = [_estimate_record("logging", logging_est)]
        for regime, (est, _) in self.audits().items():
            records.append(_estimate_record(regime.value, est))
        self._write_csv("policy_values.csv", pd.DataFrame(records))

    def stage_delta(self) -> None:
        audits = {r: audit for r, (_, audit) in self.audits().items()}
        res = aggregate_delta_test(audits, n_boot=self.config.n_boot,
                                   seed=self.config.seed)
        lo, hi = res.ci95()
        self._write_csv("delta_aggregate.csv", pd.DataFrame([{
            "delta_hat": res.delta_hat, "se_clustered": res.se_clustered,
            "ci_lo": lo, "ci_hi": hi, "t_stat": res.t_stat,
            "p_two_sided": res.p_two_sided, "p_delta_pos": res.p_delta_pos,
            "p_delta_neg": res.p_delta_neg, "n": res.n,
            "n_clusters": res.n_clusters, "decision": res.decision.value,
            "tier": res.tier.value,
        }]))
        depth = impression_depth(self.split[1])
        bins = depth_binned_delta(audits, depth, n_bins=self.config.n_bins,
                                  n_boot=self.config.n_boot,
                                  seed=self.config.seed)
        self._write_csv("delta_by_depth.csv", depth_table_frame(bins))
        self._write_csv("depth_levels.csv", depth_levels_frame(bins))
        table = depth_table_frame(bins)
        svg_line_plot(self._path("depth_delta.svg"),
                      [(table["depth_hi"].to_numpy(),
                        table["delta_hat"].to_numpy(), "delta"),
                       (table["depth_hi"].to_numpy(),
                        np.zeros(len(table)), "zero")],
                      "Interaction by impression depth", "depth (bin upper edge)",
                      "delta")
        self._register("depth_delta.svg")

    def stage_rsa(self) -> None:
        eval_rows = self.split[1]

        def predict(sub: pd.DataFrame) -> np.ndarray:
            return self.predictions(Regime.BEHAVIOR, rows=sub)

        report = rsa_pipeline(eval_rows, predict,
                              region_keys=self.config.rsa_region_keys,
                              splits=self.config.rsa_splits,
                              n_perm=self.config.n_perm,
                              seed=self.config.seed,
                              min_impressions=self.config.rsa_min_impressions,
                              min_regions=self.config.rsa_min_regions)
        self._write_csv("rsa.csv", report)

    def stage_report(self) -> None:
        curves = descriptive_curves(self.log.rows)
        self._write_csv("concentration.csv", curves["concentration"])
        self._write_csv("persistence.csv", curves["persistence"])
        self._write_csv("region_ctr.csv", curves["region_ctr"])
        conc = curves["concentration"]
        svg_line_plot(self._path("concentration_curve.svg"),
                      [(conc["cum_impression_share"].to_numpy(),
                        conc["cum_click_share"].to_numpy(), "observed"),
                       (np.array([0.0, 1.0]), np.array([0.0, 1.0]), "uniform")],
                      "Click concentration over history depth",
                      "cumulative impression share", "cumulative click share")
        self._register("concentration_curve.svg")
        pers = curves["persistence"]
        svg_line_plot(self._path("persistence_curve.svg"),
                      [(pers["prior_clicks"].to_numpy(),
                        pers["next_ctr"].to_numpy(), "next-impression CTR")],
                      "Click persistence", "clicks so far", "next-impression CTR")
        self._register("persistence_curve.svg")
        self._write_json("report.json", self._index("complete"))

    def _index(self, status: str, error: str | None = None) -> dict:
        payload = {
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "version": __version__,
            "status": status,
            "files": dict(sorted(self.written.items())),
        }
        if error is not None:
            payload["error"] = error
        return payload


STAGES = ("simulate", "features", "train", "propensity", "evaluate",
          "delta", "rsa", "report")


def _estimate_record(name: str, est) -> dict:
    lo, hi = est.ci95
    return {
        "policy": name, "value": est.value, "se": est.se,
        "ci_lo": lo, "ci_hi": hi, "t_stat": est.t_stat,
        "lift_pct": est.lift_pct, "ess": est.ess,
        "n": est.n, "n_matched": est.n_matched,
    }


def run_experiment(config: ExperimentConfig,
                   stages: tuple[str, ...] = STAGES) -> ExperimentReport:
    """Run the pipeline stages in order, writing all artifacts.

    On a stage failure, report.json is written with status INCOMPLETE and
    the failing stage before the original error propagates.
    """
    exp = Experiment(config)
    for stage in stages:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
        try:
            logger.info("stage %s", stage)
            getattr(exp, f"stage_{stage}")()
        except Exception as err:
            exp._write_json("report.json",
                            exp._index("incomplete",
                                       error=f"stage {stage}: {err}"))
            if err.args:
                err.args = (f"[stage {stage}] {err.args[0]}",) + err.args[1:]
            else:
                err.args = (f"[stage {stage}]",)
            raise
    if "report" not in stages:
        exp._write_json("report.json", exp._index("complete"))
    return ExperimentReport(
        config_hash=config.config_hash(), seed=config.seed,
        version=__version__, status="complete",
        tables=dict(exp.tables), files=dict(sorted(exp.written.items())),
    )
