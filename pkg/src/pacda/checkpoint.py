"""Single-file checkpoints.

Layout (little-endian)::

    b"PACDACKP" | version u32 | total length u64 | manifest length u64
    manifest (UTF-8 JSON) | tensor blobs (float64) | mask blob | sha256 of all preceding bytes

The manifest indexes every blob by name, shape, byte offset and size
(offsets relative to the start of the blob section).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .bnbank import BNBank, _frozen_copy
from .config import Config
from .errors import (CheckpointError, CheckpointVersionError, ChecksumError, FormatError,
                     TruncatedCheckpointError)
from .masks import pack_masks, unpack_masks
from .network import BNState, init_network
from .trainer import PacdaState

MAGIC = b"PACDACKP"
VERSION = 1
_HEADER = struct.Struct("<8sIQQ")
_DIGEST = 32
_BN_FIELDS = BNState._fields


def _bank_tensors(bank: BNBank) -> dict[str, np.ndarray]:
    out = {}
    groups = [(str(d), bank.entries[d]) for d in bank.domains()]
    if bank.source_init is not None:
        groups.append(("source", bank.source_init))
    for key, entry in groups:
        for layer, state in entry.items():
            for field, arr in zip(_BN_FIELDS, state):
                out[f"bank/{key}/{layer}/{field}"] = arr
    return out


def encode(state: PacdaState) -> bytes:
    tensors = {f"net/{k}": v for k, v in state.net.state_dict().items()}
    tensors.update(_bank_tensors(state.bank))

    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    mask_blob = pack_masks(state.ledger)
    manifest = {
        "format_version": VERSION,
        "arch": state.config.arch().to_dict(),
        "domain_count": len(state.ledger),
        "bank_domains": state.bank.domains(),
        "has_source_init": state.bank.source_init is not None,
        "tensors": index,
        "masks": {"offset": offset, "nbytes": len(mask_blob)},
        "config": state.config.to_dict(),
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    total = _HEADER.size + len(mbytes) + offset + len(mask_blob) + _DIGEST
    body = b"".join([_HEADER.pack(MAGIC, VERSION, total, len(mbytes)), mbytes, *blobs, mask_blob])
    return body + hashlib.sha256(body).digest()


def decode(buf: bytes) -> PacdaState:
    if len(buf) < _HEADER.size:
        raise TruncatedCheckpointError("checkpoint shorter than its header")
    magic, version, total, mlen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    if len(buf) < total:
        raise TruncatedCheckpointError(f"checkpoint truncated: {len(buf)} of {total} bytes")
    if len(buf) > total:
        raise ChecksumError(f"{len(buf) - total} unexpected trailing bytes")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch")

    manifest = json.loads(buf[_HEADER.size: _HEADER.size + mlen])
    base = _HEADER.size + mlen
    blob_end = len(body)
    tensors = {}
    for entry in manifest["tensors"]:
        start, n = base + entry["offset"], entry["nbytes"]
        if start + n > blob_end or n != 8 * int(np.prod(entry["shape"])):
            raise CheckpointError(f"manifest entry {entry['name']} inconsistent with blob layout")
        tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8", count=n // 8, offset=start).reshape(
            entry["shape"]).astype(np.float64)
    m = manifest["masks"]
    if base + m["offset"] + m["nbytes"] != blob_end:
        raise CheckpointError("mask blob does not end the blob section")
    try:
        ledger = unpack_masks(buf[base + m["offset"]: blob_end])
    except FormatError as e:
        raise CheckpointError(f"mask blob unreadable: {e}") from None

    config = Config.from_dict(manifest["config"])
    net = init_network(config.arch(), config.seed)
    net.load_state_dict({k[len("net/"):]: v for k, v in tensors.items() if k.startswith("net/")})

    bank = BNBank()
    layers = list(net.bn_layers())

    def entry_for(key: str) -> dict[str, BNState]:
        return {layer: BNState(*(tensors[f"bank/{key}/{layer}/{f}"] for f in _BN_FIELDS)) for layer in layers}

    for d in manifest["bank_domains"]:
        bank.entries[int(d)] = _frozen_copy(entry_for(str(d)))
    if manifest["has_source_init"]:
        bank.source_init = _frozen_copy(entry_for("source"))
    params = net.parameters()
    if ledger.shapes != {n: params[n].shape for n in net.prunable}:
        raise CheckpointError("mask ledger does not match the network's prunable tensors")
    return PacdaState(config, net, ledger, bank)


def save_checkpoint(path: str | Path, state: PacdaState) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    path = Path(path)
    data = encode(state)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> PacdaState:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint at {path}") from None
    return decode(buf)
