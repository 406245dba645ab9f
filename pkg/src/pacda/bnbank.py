"""Per-domain batch-norm snapshots."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import BankError
from .network import BNState, Network

BNEntry = dict[str, BNState]


def _frozen_copy(entry: BNEntry) -> BNEntry:
    out = {}
    for name, s in entry.items():
        arrays = [np.array(a, dtype=np.float64) for a in s]
        for a in arrays:
            a.setflags(write=False)
        out[name] = BNState(*arrays)
    return out


@dataclass
class BNBank:
    entries: dict[int, BNEntry] = field(default_factory=dict)
    source_init: BNEntry | None = None

    def __contains__(self, domain: int) -> bool:
        return domain in self.entries

    def domains(self) -> list[int]:
        return sorted(self.entries)

    def entry(self, domain: int) -> BNEntry:
        try:
            return self.entries[domain]
        except KeyError:
            raise BankError(f"no BN snapshot for domain {domain}") from None

    def snapshot(self, net: Network, domain: int) -> None:
        if domain in self.entries:
            raise BankError(f"domain {domain} already has a BN snapshot")
        self.entries[domain] = _frozen_copy(net.bn_state())

    def record_source(self, net: Network) -> None:
        self.source_init = _frozen_copy(net.bn_state())

    def restore(self, net: Network, domain: int) -> None:
        net.load_bn_state(self.entry(domain))

    def reset_to_source(self, net: Network) -> None:
        if self.source_init is None:
            raise BankError("source BN state has not been recorded")
        net.load_bn_state(self.source_init)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for domain in self.domains():
            for name, s in sorted(self.entries[domain].items()):
                h.update(f"{domain}/{name}".encode())
                for a in s:
                    h.update(np.ascontiguousarray(a).tobytes())
        if self.source_init is not None:
            for name, s in sorted(self.source_init.items()):
                h.update(f"source/{name}".encode())
                for a in s:
                    h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()
