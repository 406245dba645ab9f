"""SGD with momentum and weight decay under per-tensor gradient masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-3
    momentum_buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be nonnegative, got {self.weight_decay}")

    def reset(self) -> None:
        """Drop all momentum; called at every phase and domain boundary."""
        self.momentum_buffers.clear()


def sgd_step(
    params: Mapping[str, Tensor],
    opt: OptimizerState,
    grad_mask: Mapping[str, np.ndarray] | None = None,
) -> None:
    """One in-place update of ``params``.

    The effective gradient is ``(grad + weight_decay * w) * mask``. Entries
    whose mask is 0 keep their exact previous value, including any stale
    momentum they might carry.
    """
    grad_mask = grad_mask or {}
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        mask = grad_mask.get(name)
        if mask is not None and mask.shape != p.shape:
            raise ShapeError(f"gradient mask for {name!r} has shape {mask.shape}, expected {p.shape}")

        g = p.grad + opt.weight_decay * p.data
        if mask is not None:
            g = np.where(mask, g, 0.0)
        buf = opt.momentum_buffers.get(name)
        buf = g if buf is None else opt.momentum * buf + g
        opt.momentum_buffers[name] = buf
        updated = p.data - opt.learning_rate * buf
        p.data = updated if mask is None else np.where(mask, updated, p.data)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
