"""Synthetic multi-domain classification data.

All domains share one set of class-conditional Gaussian clusters in a base
space. A domain maps base samples through scale -> rotate -> translate, where
the rotation turns the leading feature pairs ``(0, 1), (2, 3), ...`` by the
domain's angle.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError

DATA_MAGIC = b"PACDADAT"
DATA_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    rotation: float
    translation: tuple[float, ...]
    scale: tuple[float, ...]
    noise_std: float
    n_train: int
    n_test: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        object.__setattr__(self, "scale", tuple(float(v) for v in self.scale))
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError(f"domain {self.domain_id}: splits need at least one sample")
        if self.noise_std < 0:
            raise ConfigError(f"domain {self.domain_id}: noise_std must be nonnegative")
        if len(self.translation) != len(self.scale):
            raise ConfigError(f"domain {self.domain_id}: translation and scale lengths differ")


class Split(NamedTuple):
    inputs: np.ndarray  # (n, features) float64
    labels: np.ndarray  # (n,) int64
    domain_id: int

    def __len__(self) -> int:
        return self.labels.shape[0]


class DomainData(NamedTuple):
    train: Split
    test: Split


class Batch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray
    # carried for evaluation only; training and routing never read it
    domain_id: int


def class_means(num_classes: int, dims: int, separation: float, seed: int) -> np.ndarray:
    """Random cluster centres scaled so the closest pair is exactly ``separation`` apart."""
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if dims < 1 or separation <= 0:
        raise ConfigError("dims and separation must be positive")
    raw = np.random.default_rng(seed).standard_normal((num_classes, dims))
    diff = raw[:, None, :] - raw[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    closest = dist[~np.eye(num_classes, dtype=bool)].min()
    return raw * (separation / closest)


def rotation_matrix(dims: int, angle: float, pairs: int) -> np.ndarray:
    if 2 * pairs > dims:
        raise ConfigError(f"cannot rotate {pairs} feature pairs in {dims} dimensions")
    r = np.eye(dims)
    c, s = math.cos(angle), math.sin(angle)
    for k in range(pairs):
        i, j = 2 * k, 2 * k + 1
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def sample_base(means: np.ndarray, n: int, noise_std: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Balanced labels in shuffled order plus isotropic Gaussian noise around the class means."""
    k, dims = means.shape
    labels = rng.permutation(np.arange(n) % k)
    x = means[labels] + noise_std * rng.standard_normal((n, dims))
    return x, labels.astype(np.int64)


def transform(x: np.ndarray, spec: DomainSpec, pairs: int) -> np.ndarray:
    dims = x.shape[1]
    if len(spec.scale) != dims:
        raise ConfigError(f"domain {spec.domain_id}: spec has {len(spec.scale)} features, data {dims}")
    rot = rotation_matrix(dims, spec.rotation, pairs)
    return (x * np.asarray(spec.scale)) @ rot.T + np.asarray(spec.translation)


def make_domain(means: np.ndarray, spec: DomainSpec, pairs: int) -> DomainData:
    rng = np.random.default_rng(spec.seed)
    x, y = sample_base(means, spec.n_train + spec.n_test, spec.noise_std, rng)
    x = transform(x, spec, pairs)
    n = spec.n_train
    return DomainData(Split(x[:n], y[:n], spec.domain_id), Split(x[n:], y[n:], spec.domain_id))


def make_domain_sequence(
    base_seed: int,
    specs: Sequence[DomainSpec],
    num_classes: int,
    mean_separation: float,
    rotated_pairs: int,
) -> list[DomainData]:
    if not specs:
        raise ConfigError("no domains specified")
    dims = len(specs[0].scale)
    if any(len(s.scale) != dims for s in specs):
        raise ConfigError("all domains must share the feature dimensionality")
    means = class_means(num_classes, dims, mean_separation, base_seed)
    return [make_domain(means, spec, rotated_pairs) for spec in specs]


def default_domain_specs(
    seed: int,
    input_dim: int = 16,
    rotations: Sequence[float] = (0.0, math.pi / 6, math.pi / 3, math.pi / 2),
    shifts: Sequence[float] = (0.0, 1.0, 2.0, 3.0),
    scale_drifts: Sequence[float] = (0.0, 0.1, 0.2, 0.3),
    noise_std: float = 1.0,
    n_train: int = 2000,
    n_test: int = 500,
) -> list[DomainSpec]:
    """Domain ``t`` gets rotation ``rotations[t]``, a translation of length
    ``shifts[t]`` along a seeded random direction, and per-feature scales
    ``exp(scale_drifts[t] * z)`` with seeded standard-normal ``z``."""
    if not len(rotations) == len(shifts) == len(scale_drifts):
        raise ConfigError("rotations, shifts and scale_drifts need one entry per domain")
    specs = []
    for t, (angle, shift, drift) in enumerate(zip(rotations, shifts, scale_drifts)):
        rng = np.random.default_rng([seed, 1000 + t])
        direction = rng.standard_normal(input_dim)
        direction /= np.linalg.norm(direction)
        z = rng.standard_normal(input_dim)
        specs.append(DomainSpec(
            domain_id=t,
            rotation=float(angle),
            translation=tuple(shift * direction),
            scale=tuple(np.exp(drift * z)),
            noise_std=noise_std,
            n_train=n_train,
            n_test=n_test,
            seed=int(np.random.default_rng([seed, 2000 + t]).integers(2 ** 31)),
        ))
    return specs


def iterate_batches(split: Split, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """One shuffled epoch. A trailing batch of a single sample is dropped
    (train-mode batch norm needs two)."""
    if batch_size < 1:
        raise DataError(f"batch size must be positive, got {batch_size}")
    n = len(split)
    if n == 0:
        raise DataError("empty split")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start: start + batch_size]
        if len(idx) < 2 and n > 1:
            return
        yield Batch(split.inputs[idx], split.labels[idx], split.domain_id)


def sequential_batches(split: Split, batch_size: int) -> Iterator[Batch]:
    """Unshuffled, in order; used for evaluation."""
    for start in range(0, len(split), batch_size):
        sl = slice(start, start + batch_size)
        yield Batch(split.inputs[sl], split.labels[sl], split.domain_id)


# --- split files ---------------------------------------------------------------
# magic, version u32, n u64, dims u32, domain_id i32,
# then dims columns of n little-endian float64, then n little-endian int32 labels.

_HEADER = struct.Struct("<8sIQIi")


def write_split(path: str | Path, split: Split) -> None:
    n, dims = split.inputs.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATA_MAGIC, DATA_VERSION, n, dims, split.domain_id))
        f.write(np.ascontiguousarray(split.inputs.T, dtype="<f8").tobytes())
        f.write(np.asarray(split.labels, dtype="<i4").tobytes())


def read_split(path: str | Path) -> Split:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, dims, domain_id = _HEADER.unpack_from(buf)
    if magic != DATA_MAGIC:
        raise FormatError(f"{path}: not a data split file")
    if version != DATA_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + n * dims * 8 + n * 4
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    cols = np.frombuffer(buf, dtype="<f8", count=n * dims, offset=_HEADER.size).reshape(dims, n)
    labels = np.frombuffer(buf, dtype="<i4", count=n, offset=_HEADER.size + n * dims * 8)
    return Split(cols.T.astype(np.float64), labels.astype(np.int64), int(domain_id))
