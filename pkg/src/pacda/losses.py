"""Supervised source loss and the information-maximization adaptation loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

LOG_FLOOR = float(np.log(1e-12))


@dataclass(frozen=True)
class LossConfig:
    smoothing_alpha: float = 0.1
    im_div_weight: float = 1.0

    def __post_init__(self):
        if not 0 <= self.smoothing_alpha < 1:
            raise ConfigError(f"smoothing_alpha must lie in [0, 1), got {self.smoothing_alpha}")
        if self.im_div_weight < 0:
            raise ConfigError(f"im_div_weight must be nonnegative, got {self.im_div_weight}")


def _check_logits(logits: Tensor) -> None:
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"logits must be (batch>=1, K), got {logits.shape}")


def smoothed_targets(labels: np.ndarray, num_classes: int, alpha: float) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= num_classes):
        raise ContractError(f"labels must be class indices in [0, {num_classes})")
    onehot = np.zeros((labels.shape[0], num_classes))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return (1 - alpha) * onehot + alpha / num_classes


def label_smoothed_ce(logits, labels, alpha: float = 0.1) -> Tensor:
    """Batch mean of -sum_k q_k log softmax_k(logits), q = (1-alpha)*onehot + alpha/K."""
    logits = T.as_tensor(logits)
    _check_logits(logits)
    if len(labels) != logits.shape[0]:
        raise ShapeError(f"{len(labels)} labels for a batch of {logits.shape[0]}")
    q = smoothed_targets(labels, logits.shape[1], alpha)
    return -T.mean(T.sum_(T.log_softmax(logits) * q, axis=1))


def entropy_loss(logits) -> Tensor:
    """Mean per-sample prediction entropy; log p is floored at log(1e-12)."""
    logits = T.as_tensor(logits)
    _check_logits(logits)
    logp = T.maximum(T.log_softmax(logits), LOG_FLOOR)
    return -T.mean(T.sum_(T.softmax(logits) * logp, axis=1))


def mean_prediction(logits) -> Tensor:
    return T.mean(T.softmax(T.as_tensor(logits)), axis=0)


def diversity_loss(logits) -> Tensor:
    """sum_k p_k log p_k of the minibatch-mean prediction p; lies in [-log K, 0]."""
    logits = T.as_tensor(logits)
    _check_logits(logits)
    p = mean_prediction(logits)
    return T.sum_(p * T.log(T.maximum(p, 1e-12)))


def im_loss(logits, div_weight: float = 1.0) -> Tensor:
    return entropy_loss(logits) + div_weight * diversity_loss(logits)
