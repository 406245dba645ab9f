"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ContractError
from .network import Network
from .tensor import Tensor, no_grad


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    n_probes: int,
    seed: int = 0,
    step: float = 1e-5,
) -> float:
    """Max relative error between backprop and central differences over
    ``n_probes`` random coordinates of ``params``.

    ``loss_fn`` must rebuild the loss from the current parameter values on
    every call.
    """
    if n_probes < 1:
        raise ContractError("n_probes must be >= 1")
    names = list(params)
    sizes = np.array([params[n].data.size for n in names])
    if sizes.sum() == 0:
        raise ContractError("no coordinates to probe")

    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if loss.requires_grad:
        loss.backward()

    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(n_probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for k in flat:
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        p = params[names[i]]
        idx = np.unravel_index(int(k - offsets[i]), p.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])

        orig = p.data[idx]
        with no_grad():
            p.data[idx] = orig + step
            up = loss_fn().item()
            p.data[idx] = orig - step
            down = loss_fn().item()
        p.data[idx] = orig
        worst = max(worst, relative_error(analytic, (up - down) / (2 * step)))
    return worst


def check_network_gradients(
    net: Network,
    x: np.ndarray,
    loss_fn: Callable[[Tensor], Tensor],
    n_probes: int = 20,
    seed: int = 0,
    step: float = 1e-5,
    train_mode: bool = True,
) -> float:
    """Gradient check of ``loss_fn(net(x))`` on a copy of ``net``.

    In train mode the biases feeding a BN layer are left out of the probe set:
    their exact gradient is identically zero, so a central difference sees
    only rounding noise. Use :func:`bn_cancelled_residual` to check those.
    """
    model = net.copy()
    model.train() if train_mode else model.eval()
    params = model.parameters()
    if train_mode:
        for name in model.bn_cancelled():
            params.pop(name)
    return finite_diff_check(lambda: loss_fn(model.forward(x)), params, n_probes, seed, step)


def bn_cancelled_residual(net: Network, x: np.ndarray, loss_fn: Callable[[Tensor], Tensor]) -> float:
    """Largest |analytic gradient| over biases that feed train-mode BN layers."""
    model = net.copy().train()
    for p in model.parameters().values():
        p.grad = None
    loss_fn(model.forward(x)).backward()
    params = model.parameters()
    return max(float(np.abs(params[n].grad).max()) for n in model.bn_cancelled())
