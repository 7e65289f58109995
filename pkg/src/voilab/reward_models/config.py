"""Learner configuration shared by the logistic and sequence models."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class LearnerKind(str, Enum):
    LOGISTIC = "logistic"
    SEQUENCE = "sequence"


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters for either learner kind.

    The sequence defaults are desk-scale: window 32, hidden size 32, one
    LSTM layer, two attention heads, embedding dimension 8, dropout 0.1.
    Logistic fits use L-BFGS with penalty l2_penalty on the coefficients
    (intercept unpenalized). Sequence fits use an adaptive-moment optimizer
    with decoupled weight decay at a fixed learning rate.
    """

    kind: LearnerKind = LearnerKind.LOGISTIC
    l2_penalty: float = 1e-6
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    epochs: int = 30
    hidden_size: int = 32
    lstm_layers: int = 1
    attention_heads: int = 2
    window: int = 32
    embed_dim: int = 8
    dropout_rate: float = 0.1
    seed: int = 0
    batch_size: int = 64
    max_iter: int = 500  # L-BFGS iteration cap for logistic fits

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.hidden_size % self.attention_heads != 0:
            raise ValueError("hidden_size must be divisible by attention_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_penalty < 0 or self.weight_decay < 0:
            raise ValueError("penalties must be >= 0")
        if self.epochs < 1 or self.lstm_layers < 1 or self.embed_dim < 1:
            raise ValueError("epochs, lstm_layers, embed_dim must be >= 1")
