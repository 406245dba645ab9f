"""Accuracy matrices, forgetting deltas, routing quality and pruning curves."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ContractError, ShapeError

if TYPE_CHECKING:
    from .config import Config
    from .datagen import DomainData
    from .network import Network
    from .trainer import PacdaState


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size == 0:
        raise ContractError("accuracy of an empty batch")
    return float(np.mean(logits.argmax(axis=1) == labels))


def forgetting_delta(acc_end: float, acc_after_training: float) -> float:
    """End-of-sequence accuracy minus accuracy right after the domain was trained.

    Negative means forgetting. Units pass through (fractions or percent).
    """
    return acc_end - acc_after_training


def as_points(value: float, percent: bool = False) -> float:
    """Round to 0.1-point precision, converting fractions to percent unless already in percent."""
    return round(value if percent else 100.0 * value, 1)


@dataclass
class AccuracyMatrix:
    row_labels: list[str]
    col_labels: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.row_labels), len(self.col_labels)):
            raise ShapeError("accuracy matrix grid is incomplete")
        if np.any((self.values < 0) | (self.values > 1)):
            raise ContractError("accuracies must lie in [0, 1]")

    def diagonal_dominant(self) -> bool:
        """Each column's maximum sits on the diagonal (square matrices only)."""
        v = self.values
        return v.shape[0] == v.shape[1] and all(v[j, j] >= v[:, j].max() for j in range(v.shape[1]))

    def to_table(self, corner: str = "") -> str:
        width = max(6, *(len(s) for s in self.row_labels + self.col_labels + [corner]))
        head = corner.ljust(width) + "".join(c.rjust(width + 1) for c in self.col_labels)
        lines = [head]
        for label, row in zip(self.row_labels, self.values):
            lines.append(label.ljust(width) + "".join(f"{as_points(v):>{width + 1}.1f}" for v in row))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"rows": self.row_labels, "cols": self.col_labels, "values": self.values.tolist()}


def cross_mask_matrix(state: PacdaState, data: Sequence[DomainData]) -> AccuracyMatrix:
    """Rows: mask/BN of domain i. Columns: test data of domain j."""
    from .router import predict_with_domain_id

    domains = list(range(len(state.ledger)))
    values = np.zeros((len(domains), len(data)))
    for i in domains:
        for j, d in enumerate(data):
            logits = predict_with_domain_id(d.test.inputs, i, state.net, state.ledger, state.bank)
            values[i, j] = accuracy(logits, d.test.labels)
    return AccuracyMatrix([f"M{i}" for i in domains], [f"D{j}" for j in range(len(data))], values)


@dataclass
class RoutingReport:
    routing_accuracy: dict[int, float]   # fraction of batches routed to the true domain
    routed_accuracy: dict[int, float]    # end-to-end, BN-statistic routing
    oracle_accuracy: dict[int, float]    # with domain id

    def to_dict(self) -> dict:
        return {k: {str(d): v for d, v in getattr(self, k).items()}
                for k in ("routing_accuracy", "routed_accuracy", "oracle_accuracy")}


def routing_report(
    state: PacdaState,
    data: Sequence[DomainData],
    batch_size: int = 64,
    n_random_batches: int = 100,
    seed: int = 0,
) -> RoutingReport:
    """Routing decisions are judged on ``n_random_batches`` random test batches
    per domain; routed accuracy covers every test sample once."""
    from .router import predict_with_domain_id, route_batch

    net, ledger, bank = state.net, state.ledger, state.bank
    routing, routed, oracle = {}, {}, {}
    for j in range(len(ledger)):
        test = data[j].test
        rng = np.random.default_rng([seed, j])
        n = len(test)
        size = min(batch_size, n)
        hits = 0
        for _ in range(n_random_batches):
            idx = rng.choice(n, size=size, replace=False)
            hits += route_batch(test.inputs[idx], net, ledger, bank).chosen_domain == j
        routing[j] = hits / n_random_batches

        # near-equal chunks of at most batch_size, so no chunk falls below 2
        chunks = np.array_split(rng.permutation(n), -(-n // size))
        correct = 0
        for idx in chunks:
            decision = route_batch(test.inputs[idx], net, ledger, bank)
            correct += int((decision.predictions == test.labels[idx]).sum())
        routed[j] = correct / n
        oracle[j] = accuracy(predict_with_domain_id(test.inputs, j, net, ledger, bank), test.labels)
    return RoutingReport(routing, routed, oracle)


@dataclass
class PruningPoint:
    fraction: float
    accuracy_pruned: float
    accuracy_finetuned: float


def pruning_curve(
    net: Network,
    data: DomainData,
    fractions: Sequence[float],
    config: Config,
) -> list[PruningPoint]:
    """L1-prune a copy of a trained dense model to each fraction, measure, fine-tune, measure."""
    from .masks import MaskLedger
    from .optim import OptimizerState
    from .trainer import evaluate, phase_rng, run_epochs

    points = []
    base = evaluate(net, data.test)
    for frac in fractions:
        if not 0 <= frac < 1:
            raise ContractError(f"pruning fraction must lie in [0, 1), got {frac}")
        if frac == 0:
            points.append(PruningPoint(0.0, base, base))
            continue
        model = net.copy()
        ledger = MaskLedger.for_network(model)
        ledger.extend(model, 1.0 - frac)
        mask = ledger.mask(0)
        before = evaluate(model, data.test, mask)
        opt = OptimizerState(config.lr_source, config.momentum, config.weight_decay)
        run_epochs(model, data.train, epochs=config.n_epochs_finetune, params=model.parameters(), opt=opt,
                   objective="ce", config=config, rng=phase_rng(config, 0, "source_finetune"),
                   grad_mask=ledger.gradient_mask(0, "finetune"), phase="prune_finetune", domain=0)
        points.append(PruningPoint(float(frac), before, evaluate(model, data.test, mask)))
    return points
