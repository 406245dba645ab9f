"""Flat run configuration stored as a JSON object.

Every key is explicit; unknown keys and wrongly typed values are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .datagen import DomainSpec, default_domain_specs
from .errors import ConfigError
from .losses import LossConfig
from .network import ArchSpec


@dataclass
class Config:
    seed: int = 0
    # architecture
    input_dim: int = 16
    hidden_widths: list[int] = field(default_factory=lambda: [64, 64])
    bottleneck_dim: int = 32
    num_classes: int = 8
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # losses
    smoothing_alpha: float = 0.1
    im_div_weight: float = 1.0
    # schedule
    keep_fractions: list[float] | None = None  # None: 1/n_domains each
    n_epochs_train: int = 30
    n_epochs_finetune: int = 10
    batch_size: int = 64
    lr_source: float = 1e-2
    lr_adapt: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    reinit_free_weights: bool = False
    bn_reset: str = "source"  # "source": post-training source BN; "init": architecture default
    # data
    rotations: list[float] = field(default_factory=lambda: [0.0, math.pi / 6, math.pi / 3, math.pi / 2])
    shifts: list[float] = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    scale_drifts: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3])
    rotated_pairs: int = 4
    noise_std: float = 1.0
    mean_separation: float = 4.0
    n_train: int = 2000
    n_test: int = 500
    # inference
    route_batch_size: int = 64

    def __post_init__(self):
        self.validate()

    @property
    def n_domains(self) -> int:
        return len(self.rotations)

    @property
    def keep(self) -> list[float]:
        if self.keep_fractions is not None:
            return list(self.keep_fractions)
        return [1.0 / self.n_domains] * self.n_domains

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not _type_ok(value, f.type):
                raise ConfigError(f"{f.name}: expected {f.type}, got {value!r}")
        if self.n_domains < 1:
            raise ConfigError("at least one domain required")
        if not len(self.rotations) == len(self.shifts) == len(self.scale_drifts):
            raise ConfigError("rotations, shifts and scale_drifts need one entry per domain")
        keep = self.keep
        if len(keep) != self.n_domains:
            raise ConfigError(f"{len(keep)} keep fractions for {self.n_domains} domains")
        if any(not 0 < p <= 1 for p in keep) or sum(keep) > 1 + 1e-9:
            raise ConfigError(f"keep fractions must lie in (0, 1] and sum to at most 1, got {keep}")
        for name in ("n_epochs_train", "n_epochs_finetune", "batch_size", "route_batch_size", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.route_batch_size < 2:
            raise ConfigError("route_batch_size must be >= 2")
        if self.bn_reset not in ("source", "init"):
            raise ConfigError(f"bn_reset must be 'source' or 'init', got {self.bn_reset!r}")
        for name in ("lr_source", "lr_adapt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must lie in [0, 1) and weight_decay be nonnegative")
        if self.noise_std < 0 or self.mean_separation <= 0:
            raise ConfigError("noise_std must be >= 0 and mean_separation > 0")
        if 2 * self.rotated_pairs > self.input_dim or self.rotated_pairs < 0:
            raise ConfigError(f"cannot rotate {self.rotated_pairs} pairs of {self.input_dim} features")
        self.arch()
        self.loss()

    def arch(self) -> ArchSpec:
        return ArchSpec(self.input_dim, tuple(self.hidden_widths), self.bottleneck_dim,
                        self.num_classes, self.bn_momentum, self.bn_eps)

    def loss(self) -> LossConfig:
        return LossConfig(self.smoothing_alpha, self.im_div_weight)

    def domain_specs(self) -> list[DomainSpec]:
        return default_domain_specs(
            self.seed, self.input_dim, self.rotations, self.shifts, self.scale_drifts,
            self.noise_std, self.n_train, self.n_test)

    def replace(self, **changes) -> Config:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Config:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(path: str | Path) -> Config:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return Config.from_dict(data)


def _type_ok(value: Any, annotation: str) -> bool:
    ann = annotation.replace(" ", "")
    if ann.endswith("|None"):
        if value is None:
            return True
        ann = ann[: -len("|None")]
    if ann == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if ann == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if ann == "bool":
        return isinstance(value, bool)
    if ann == "str":
        return isinstance(value, str)
    if ann.startswith("list["):
        inner = ann[5:-1]
        return isinstance(value, list) and all(_type_ok(v, inner) for v in value)
    return True
