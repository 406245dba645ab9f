"""Cumulative per-domain parameter masks over the prunable weights.

Domain ``t`` owns the weights in ``M_t \\ M_{t-1}``. Masks are nested, each
prunable tensor is pruned to its own cumulative keep fraction, and the whole
ledger packs into a compact little-endian bit stream.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError, FormatError, LedgerError, ShapeError
from .network import Network

MASK_MAGIC = b"PMSK"
MASK_VERSION = 1
_BUDGET_SLACK = 1e-9

Mask = dict[str, np.ndarray]


def keep_count(n: int, cumulative_keep: float) -> int:
    """round-half-up of ``n * cumulative_keep``."""
    return int(math.floor(n * cumulative_keep + 0.5))


def select_l1_mask(weights: np.ndarray, prior_mask: np.ndarray | None, cumulative_keep: float) -> np.ndarray:
    """Keep ``prior_mask`` plus the largest-magnitude free weights.

    The result has ``keep_count(n, cumulative_keep)`` bits set; ties between
    equal magnitudes go to the lowest flat index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    prior = np.zeros(weights.shape, dtype=bool) if prior_mask is None else np.asarray(prior_mask, dtype=bool)
    if prior.shape != weights.shape:
        raise ShapeError(f"prior mask shape {prior.shape} does not match weights {weights.shape}")
    if not 0 <= cumulative_keep <= 1 + _BUDGET_SLACK:
        raise LedgerError(f"cumulative keep fraction {cumulative_keep} outside [0, 1]")

    n = weights.size
    target = min(keep_count(n, cumulative_keep), n)
    claimed = int(prior.sum())
    if target < claimed:
        raise LedgerError(
            f"keep fraction {cumulative_keep} asks for {target} weights but {claimed} are already claimed")

    flat_prior = prior.ravel()
    free = np.flatnonzero(~flat_prior)
    # stable sort on -|w|: equal magnitudes stay in ascending index order
    order = np.argsort(-np.abs(weights.ravel()[free]), kind="stable")
    chosen = free[order[: target - claimed]]
    out = flat_prior.copy()
    out[chosen] = True
    return out.reshape(weights.shape)


@dataclass
class MaskLedger:
    shapes: dict[str, tuple[int, ...]]
    masks: list[Mask] = field(default_factory=list)
    keep_fractions: list[float] = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network) -> MaskLedger:
        params = net.parameters()
        return cls({name: params[name].shape for name in net.prunable})

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def budget_used(self) -> float:
        return float(sum(self.keep_fractions))

    def cumulative_keep(self, t: int) -> float:
        return min(1.0, float(sum(self.keep_fractions[: t + 1])))

    def mask(self, t: int) -> Mask:
        if not 0 <= t < len(self.masks):
            raise LedgerError(f"no mask stored for domain {t} (ledger holds {len(self.masks)})")
        return self.masks[t]

    def extend(self, net: Network, keep_fraction: float) -> Mask:
        """Claim ``keep_fraction`` of every prunable tensor for the next domain.

        Weights outside the new cumulative mask are zeroed in ``net``.
        """
        if not 0 < keep_fraction < 1 + _BUDGET_SLACK:
            raise LedgerError(f"keep fraction must lie in (0, 1], got {keep_fraction}")
        if self.budget_used + keep_fraction > 1 + _BUDGET_SLACK:
            raise LedgerError(
                f"keep budget exceeded: {self.budget_used:.6g} used, {keep_fraction:.6g} requested")
        params = net.parameters()
        if set(self.shapes) != set(net.prunable):
            raise ContractError("ledger tensors do not match the network's prunable set")

        cumulative = min(1.0, self.budget_used + keep_fraction)
        prior = self.masks[-1] if self.masks else None
        new: Mask = {}
        for name in self.shapes:
            w = params[name]
            m = select_l1_mask(w.data, None if prior is None else prior[name], cumulative)
            w.data = np.where(m, w.data, 0.0)
            new[name] = m
        self.masks.append(new)
        self.keep_fractions.append(float(keep_fraction))
        return new

    def gradient_mask(self, t: int, phase: str) -> Mask:
        """Trainable prunable weights of domain ``t``.

        ``adapt``: everything not claimed by domains before ``t``.
        ``finetune``: only the weights newly claimed by ``t``.
        """
        if phase == "adapt":
            if t == 0:
                return {name: np.ones(shape, dtype=bool) for name, shape in self.shapes.items()}
            prev = self.mask(t - 1)
            return {name: ~prev[name] for name in self.shapes}
        if phase == "finetune":
            if t >= len(self.masks):
                raise LedgerError(f"cannot fine-tune domain {t}: its mask has not been selected")
            cur = self.masks[t]
            if t == 0:
                return {name: cur[name].copy() for name in self.shapes}
            prev = self.masks[t - 1]
            return {name: cur[name] & ~prev[name] for name in self.shapes}
        raise ContractError(f"unknown phase {phase!r}")

    def claimed_by(self) -> dict[str, np.ndarray]:
        """Owning domain index per weight, -1 where unclaimed."""
        out = {}
        for name, shape in self.shapes.items():
            owner = np.full(shape, -1, dtype=np.int64)
            for t in reversed(range(len(self.masks))):
                owner[self.masks[t][name]] = t
            out[name] = owner
        return out

    def free_counts(self) -> dict[str, int]:
        if not self.masks:
            return {name: int(np.prod(shape)) for name, shape in self.shapes.items()}
        return {name: int((~self.masks[-1][name]).sum()) for name in self.shapes}

    def check_invariants(self) -> None:
        """Raise LedgerError on any nesting, cardinality or budget violation."""
        if self.budget_used > 1 + _BUDGET_SLACK:
            raise LedgerError(f"keep fractions sum to {self.budget_used}")
        if len(self.keep_fractions) != len(self.masks):
            raise LedgerError("one keep fraction per mask required")
        owners = self.claimed_by()
        for t, m in enumerate(self.masks):
            cum = self.cumulative_keep(t)
            for name, shape in self.shapes.items():
                bits = m[name]
                if bits.shape != shape or bits.dtype != bool:
                    raise LedgerError(f"mask {t} for {name} malformed")
                n = bits.size
                count = int(bits.sum())
                if abs(count - keep_count(n, cum)) > 1 or count not in (math.floor(n * cum), math.ceil(n * cum)):
                    raise LedgerError(f"mask {t} for {name}: {count} bits set, expected ~{n * cum:.2f}")
                prev = self.masks[t - 1][name] if t else np.zeros(shape, dtype=bool)
                if np.any(prev & ~bits):
                    raise LedgerError(f"mask {t - 1} is not contained in mask {t} for {name}")
                if not np.array_equal(owners[name] == t, bits & ~prev):
                    raise LedgerError(f"claimed_by disagrees with mask deltas at domain {t} for {name}")


def check_zero_outside(net: Network, mask: Mapping[str, np.ndarray]) -> None:
    params = net.parameters()
    for name, m in mask.items():
        if np.any(params[name].data[~m] != 0):
            raise LedgerError(f"{name} has nonzero weights outside the active mask")


# --- bit packing -------------------------------------------------------------

def pack_bits(bits: np.ndarray) -> bytes:
    """LSB-first within each byte, zero padded to a whole byte."""
    return np.packbits(np.asarray(bits, dtype=bool).ravel(), bitorder="little").tobytes()


def unpack_bits(buf: bytes, n: int) -> np.ndarray:
    if len(buf) * 8 < n:
        raise FormatError(f"need {n} bits, got {len(buf) * 8}")
    return np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=n, bitorder="little").astype(bool)


def pack_masks(ledger: MaskLedger) -> bytes:
    """Manifest (tensor ids, shapes, bit lengths, keep fractions) then one bit block per mask and tensor."""
    parts = [MASK_MAGIC, struct.pack("<HII", MASK_VERSION, len(ledger.shapes), len(ledger.masks))]
    for name, shape in ledger.shapes.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}Q", *shape))
        parts.append(struct.pack("<Q", int(np.prod(shape))))
    parts.append(struct.pack(f"<{len(ledger.keep_fractions)}d", *ledger.keep_fractions))
    for m in ledger.masks:
        for name in ledger.shapes:
            parts.append(pack_bits(m[name]))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"mask stream truncated at byte {self.pos} (wanted {n} more)")
        out = bytes(self.buf[self.pos: self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack_masks(buf: bytes) -> MaskLedger:
    r = _Reader(buf)
    if r.take(4) != MASK_MAGIC:
        raise FormatError("not a mask stream (bad magic)")
    version, n_tensors, n_masks = r.unpack("<HII")
    if version != MASK_VERSION:
        raise FormatError(f"unsupported mask stream version {version}")
    shapes: dict[str, tuple[int, ...]] = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        (nbits,) = r.unpack("<Q")
        if nbits != int(np.prod(shape)):
            raise FormatError(f"{name}: bit length {nbits} disagrees with shape {shape}")
        shapes[name] = tuple(int(s) for s in shape)
    keep = [float(v) for v in r.unpack(f"<{n_masks}d")]
    masks = []
    for _ in range(n_masks):
        m = {}
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            m[name] = unpack_bits(r.take((n + 7) // 8), n).reshape(shape)
        masks.append(m)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after mask stream")
    return MaskLedger(shapes, masks, keep)
