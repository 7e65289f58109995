"""Location-aware ad market experiments: simulation, modeling, off-policy evaluation."""

__version__ = "0.1.0"

from .experiment import ExperimentConfig, run_experiment
from .feature_pipeline import Regime, build_regime_matrix, split_users_train_test
from .market_sim import SimConfig, sample_market, simulate_logs
from .policy_eval import Policy, induce_greedy_policy, ips_estimate
from .propensity import balance_report, build_eligibility, cross_fit_propensities
from .reward_models import LearnerConfig, LearnerKind, train_learner
from .spatial_stats import gearys_c, morans_i, permutation_pvalue, rsa_pipeline
from .voi_tests import (
    Decision,
    SignificanceTier,
    aggregate_delta_test,
    classify_interaction,
    depth_binned_delta,
)

__all__ = [
    "__version__",
    "ExperimentConfig", "run_experiment",
    "Regime", "build_regime_matrix", "split_users_train_test",
    "SimConfig", "sample_market", "simulate_logs",
    "Policy", "induce_greedy_policy", "ips_estimate",
    "balance_report", "build_eligibility", "cross_fit_propensities",
    "LearnerConfig", "LearnerKind", "train_learner",
    "gearys_c", "morans_i", "permutation_pvalue", "rsa_pipeline",
    "Decision", "SignificanceTier", "aggregate_delta_test",
    "classify_interaction", "depth_binned_delta",
]
