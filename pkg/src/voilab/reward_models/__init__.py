"""Click-probability models per information regime, plus their evaluation metrics.

Static regimes use an L2-regularized logistic learner with one head per ad.
Behavioral regimes can use a recurrent sequence model with causal attention.
`train_learner` dispatches on the configured kind.
"""

from __future__ import annotations

from .config import LearnerConfig, LearnerKind
from .logistic import LogisticRewardModel, fit_l2_logistic
from .metrics import (
    PredictionMetrics,
    bernoulli_entropy,
    binary_log_loss,
    auc_score,
    relative_information_gain,
    evaluate_predictions,
)
from .sequence import (
    SequenceDataset,
    SequenceModel,
    SequenceSpec,
    build_sequence_dataset,
    build_sequence_spec,
    causal_attention_forward,
    gradient_check,
    lstm_cell_step,
    sequence_forward,
)

__all__ = [
    "LearnerConfig",
    "LearnerKind",
    "LogisticRewardModel",
    "fit_l2_logistic",
    "PredictionMetrics",
    "bernoulli_entropy",
    "binary_log_loss",
    "auc_score",
    "relative_information_gain",
    "evaluate_predictions",
    "SequenceDataset",
    "SequenceModel",
    "SequenceSpec",
    "build_sequence_dataset",
    "build_sequence_spec",
    "causal_attention_forward",
    "gradient_check",
    "lstm_cell_step",
    "sequence_forward",
    "train_learner",
]


def train_learner(data, config: LearnerConfig):
    """Fit the configured learner kind on prepared training data.

    LOGISTIC expects a RegimeMatrix (fit per-ad heads on its rows);
    SEQUENCE expects a SequenceDataset of windowed user histories.
    """
    if config.kind is LearnerKind.LOGISTIC:
        return LogisticRewardModel.fit(data, config)
    model = SequenceModel(config, data.spec)
    model.fit(data)
    return model
