"""Fully connected encoder, bottleneck and linear classifier with batch norm.

Topology for hidden widths ``[h0, h1, ...]``, bottleneck ``d`` and ``K``
classes::

    x -> fc0 -> BN -> ReLU -> fc1 -> BN -> ReLU -> ... -> bottleneck -> BN -> classifier

Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
Parameter masks are applied functionally at forward time; the stored weights
are never touched by a masked forward.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    bottleneck_dim: int
    num_classes: int
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        widths = (self.input_dim, *self.hidden_widths, self.bottleneck_dim)
        if any(int(w) < 1 for w in widths):
            raise ConfigError(f"layer widths must be >= 1, got {widths}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if not 0 < self.bn_momentum <= 1:
            raise ConfigError(f"bn_momentum must lie in (0, 1], got {self.bn_momentum}")
        if not self.bn_eps > 0:
            raise ConfigError(f"bn_eps must be positive, got {self.bn_eps}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "bottleneck_dim": self.bottleneck_dim,
            "num_classes": self.num_classes,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }


class BNState(NamedTuple):
    """Plain-array copy of one BN layer: the unit stored in a BN bank."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor


@dataclass
class BNLayer:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def fresh(cls, features: int, momentum: float, eps: float, name: str) -> BNLayer:
        return cls(
            gamma=Tensor(np.ones(features), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(features), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(features),
            running_var=np.ones(features),
            momentum=momentum,
            eps=eps,
        )

    def state(self) -> BNState:
        return BNState(self.gamma.data.copy(), self.beta.data.copy(),
                       self.running_mean.copy(), self.running_var.copy())

    def load(self, s: BNState) -> None:
        if s.gamma.shape != self.gamma.shape:
            raise ShapeError(f"BN state has {s.gamma.shape[0]} features, layer has {self.gamma.shape[0]}")
        self.gamma.data = s.gamma.copy()
        self.beta.data = s.beta.copy()
        self.running_mean = s.running_mean.copy()
        self.running_var = s.running_var.copy()

    def forward(self, x: Tensor, override: BNState | None = None) -> Tensor:
        """Normalize ``x`` of shape (batch, features).

        With ``override`` the layer normalizes by the given state's running
        statistics and affine terms and mutates nothing, regardless of mode.
        """
        if x.ndim != 2 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"BN expects (batch, {self.gamma.shape[0]}), got {x.shape}")
        if override is not None:
            std = np.sqrt(override.running_var + self.eps)
            return (x - override.running_mean) / std * override.gamma + override.beta
        if not self.training:
            std = np.sqrt(self.running_var + self.eps)
            return self.gamma * ((x - self.running_mean) / std) + self.beta

        n = x.shape[0]
        if n < 2:
            raise ContractError("batch norm in train mode needs a batch of at least 2")
        mu = T.mean(x, axis=0)
        centered = x - mu
        var = T.mean(centered * centered, axis=0)
        xhat = centered * T.power(var + self.eps, -0.5)

        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mu.data
        self.running_var = (1 - m) * self.running_var + m * var.data * (n / (n - 1))
        return self.gamma * xhat + self.beta


@dataclass
class Layer:
    name: str
    linear: Linear
    bn: BNLayer | None = None
    relu: bool = False


@dataclass
class Network:
    arch: ArchSpec
    layers: list[Layer] = field(default_factory=list)

    @property
    def prunable(self) -> list[str]:
        """Linear weights of the encoder and bottleneck, in layer order."""
        return [f"{layer.name}.weight" for layer in self.layers[:-1]]

    @property
    def classifier(self) -> Layer:
        return self.layers[-1]

    @property
    def first_bn_id(self) -> str:
        for layer in self.layers:
            if layer.bn is not None:
                return layer.name
        raise ConfigError("network has no batch-norm layer")

    def bn_layers(self) -> dict[str, BNLayer]:
        return {layer.name: layer.bn for layer in self.layers if layer.bn is not None}

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors keyed by name, in layer order."""
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out[f"{layer.name}.weight"] = layer.linear.weight
            out[f"{layer.name}.bias"] = layer.linear.bias
            if layer.bn is not None:
                out[f"{layer.name}.bn.gamma"] = layer.bn.gamma
                out[f"{layer.name}.bn.beta"] = layer.bn.beta
        return out

    def classifier_parameters(self) -> dict[str, Tensor]:
        name = self.classifier.name
        return {f"{name}.weight": self.classifier.linear.weight, f"{name}.bias": self.classifier.linear.bias}

    def bn_cancelled(self) -> list[str]:
        """Biases directly followed by BN: in train mode their gradient is identically zero."""
        return [f"{layer.name}.bias" for layer in self.layers if layer.bn is not None]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and BN buffer, in a fixed order."""
        out = {name: p.data.copy() for name, p in self.parameters().items()}
        for name, bn in self.bn_layers().items():
            out[f"{name}.bn.running_mean"] = bn.running_mean.copy()
            out[f"{name}.bn.running_var"] = bn.running_var.copy()
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        expected = set(params) | {f"{n}.bn.{s}" for n in self.bn_layers() for s in ("running_mean", "running_var")}
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: shape {state[name].shape}, expected {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, bn in self.bn_layers().items():
            bn.running_mean = np.array(state[f"{name}.bn.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{name}.bn.running_var"], dtype=np.float64)

    def bn_state(self) -> dict[str, BNState]:
        return {name: bn.state() for name, bn in self.bn_layers().items()}

    def load_bn_state(self, states: Mapping[str, BNState]) -> None:
        layers = self.bn_layers()
        if set(states) != set(layers):
            raise ShapeError(f"BN topology mismatch: {sorted(states)} vs {sorted(layers)}")
        for name, bn in layers.items():
            bn.load(states[name])

    def train(self) -> Network:
        for bn in self.bn_layers().values():
            bn.training = True
        return self

    def eval(self) -> Network:
        for bn in self.bn_layers().values():
            bn.training = False
        return self

    def copy(self) -> Network:
        return copy.deepcopy(self)

    def check_mask(self, mask: Mapping[str, np.ndarray]) -> None:
        if set(mask) != set(self.prunable):
            raise ContractError(f"mask covers {sorted(mask)}, expected exactly {self.prunable}")
        params = self.parameters()
        for name, m in mask.items():
            if m.shape != params[name].shape:
                raise ShapeError(f"mask for {name} has shape {m.shape}, expected {params[name].shape}")

    def _weight(self, layer: Layer, mask: Mapping[str, np.ndarray] | None) -> Tensor:
        w = layer.linear.weight
        if mask is None:
            return w
        m = mask.get(f"{layer.name}.weight")
        return w if m is None else T.apply_mask(w, m)

    def forward(
        self,
        x,
        mask: Mapping[str, np.ndarray] | None = None,
        bn_source: Mapping[str, BNState] | None = None,
        trace: dict[str, Tensor] | None = None,
    ) -> Tensor:
        """Logits of shape (batch, K).

        ``bn_source`` replaces the live BN layers with stored states (read-only,
        eval-style normalization). ``trace``, if given, receives each layer's
        pre-BN and output activations.
        """
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.arch.input_dim:
            raise ShapeError(f"expected input (batch, {self.arch.input_dim}), got {x.shape}")
        if mask is not None:
            self.check_mask(mask)
        if bn_source is not None and set(bn_source) != set(self.bn_layers()):
            raise ShapeError(f"BN source covers {sorted(bn_source)}, network has {sorted(self.bn_layers())}")

        h = x
        for layer in self.layers:
            h = h @ self._weight(layer, mask) + layer.linear.bias
            if trace is not None:
                trace[f"{layer.name}.pre_bn"] = h
            if layer.bn is not None:
                h = layer.bn.forward(h, None if bn_source is None else bn_source[layer.name])
            if layer.relu:
                h = T.relu(h)
            if trace is not None:
                trace[f"{layer.name}.out"] = h
        return h

    __call__ = forward

    def first_bn_input(self, x, mask: Mapping[str, np.ndarray] | None = None) -> Tensor:
        """Activations entering the first BN layer under ``mask``."""
        first = self.first_bn_id
        x = T.as_tensor(x)
        if mask is not None:
            self.check_mask(mask)
        h = x
        for layer in self.layers:
            h = h @ self._weight(layer, mask) + layer.linear.bias
            if layer.name == first:
                return h
            # unreachable for the standard topology: the first layer carries BN
            if layer.relu:
                h = T.relu(h)
        raise ConfigError("network has no batch-norm layer")


def init_network(arch: ArchSpec, seed: int) -> Network:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fresh BN."""
    rng = np.random.default_rng(seed)

    def linear(fan_in: int, fan_out: int, name: str) -> Linear:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        return Linear(Tensor(w, requires_grad=True, name=f"{name}.weight"),
                      Tensor(b, requires_grad=True, name=f"{name}.bias"))

    def bn(features: int, name: str) -> BNLayer:
        return BNLayer.fresh(features, arch.bn_momentum, arch.bn_eps, f"{name}.bn")

    layers = []
    fan_in = arch.input_dim
    for i, width in enumerate(arch.hidden_widths):
        name = f"fc{i}"
        layers.append(Layer(name, linear(fan_in, width, name), bn(width, name), relu=True))
        fan_in = width
    layers.append(Layer("bottleneck", linear(fan_in, arch.bottleneck_dim, "bottleneck"),
                        bn(arch.bottleneck_dim, "bottleneck")))
    layers.append(Layer("classifier", linear(arch.bottleneck_dim, arch.num_classes, "classifier")))
    return Network(arch, layers)


def parameter_count(net: Network) -> int:
    return sum(p.data.size for p in net.parameters().values())
