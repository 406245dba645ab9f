"""Domain-id-free inference by batch-norm statistic deviation.

A batch is scored against every stored domain by comparing the mean and
unbiased variance of its first-BN-layer input (under that domain's mask) with
the domain's stored running statistics. The domain with the smallest score
supplies the mask and BN state used for prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bnbank import BNBank
from .errors import BankError, ContractError
from .masks import MaskLedger
from .network import Network
from .tensor import no_grad


@dataclass
class RoutingDecision:
    chosen_domain: int
    bnsd_scores: dict[int, float]
    logits: np.ndarray

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)

    def to_record(self) -> dict:
        return {
            "chosen_domain": self.chosen_domain,
            "bnsd_scores": {str(k): v for k, v in self.bnsd_scores.items()},
            "predictions": self.predictions.tolist(),
        }


def batch_stats(acts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and unbiased variance over the batch axis."""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[0] < 2:
        raise ContractError(f"batch statistics need (batch>=2, features), got {acts.shape}")
    return acts.mean(axis=0), acts.var(axis=0, ddof=1)


def routable_domains(ledger: MaskLedger, bank: BNBank) -> list[int]:
    return [d for d in bank.domains() if d < len(ledger)]


def bnsd(x, domain: int, net: Network, ledger: MaskLedger, bank: BNBank) -> float:
    """Sum over first-BN features of squared mean and variance deviations."""
    if domain not in bank or domain >= len(ledger):
        raise BankError(f"domain {domain} has no stored mask and BN state")
    with no_grad():
        acts = net.first_bn_input(x, ledger.mask(domain)).data
    mean, var = batch_stats(acts)
    ref = bank.entry(domain)[net.first_bn_id]
    return float(((mean - ref.running_mean) ** 2).sum() + ((var - ref.running_var) ** 2).sum())


def _masked_eval(x, domain: int, net: Network, ledger: MaskLedger, bank: BNBank) -> np.ndarray:
    with no_grad():
        return net.forward(x, ledger.mask(domain), bn_source=bank.entry(domain)).data


def route_batch(x, net: Network, ledger: MaskLedger, bank: BNBank) -> RoutingDecision:
    """Score all stored domains, predict with the argmin (lowest index on ties).

    Leaves the live BN layers restored to the chosen domain.
    """
    domains = routable_domains(ledger, bank)
    if not domains:
        raise BankError("no domain has both a mask and a BN snapshot")
    scores = {d: bnsd(x, d, net, ledger, bank) for d in domains}
    chosen = min(domains, key=lambda d: (scores[d], d))
    logits = _masked_eval(x, chosen, net, ledger, bank)
    bank.restore(net, chosen)
    return RoutingDecision(chosen, scores, logits)


def predict_with_domain_id(x, domain: int, net: Network, ledger: MaskLedger, bank: BNBank) -> np.ndarray:
    """Oracle inference: the given domain's BN state and mask, no scoring."""
    bank.restore(net, domain)
    return _masked_eval(x, domain, net, ledger, bank)
