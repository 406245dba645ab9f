"""Source training with weight selection, then masked sequential adaptation.

Per target domain ``t``:

0. reset BN to the source state, clear momentum;
1. minimize the IM loss, updating only weights not claimed by earlier domains;
2. L1-select ``M_t`` from the cumulative keep fraction (free weights outside it are zeroed);
3. fine-tune only the newly claimed weights;
4. snapshot BN for domain ``t``.

The BN snapshot is taken after fine-tuning, since train-mode forwards during
fine-tuning keep moving the running statistics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses
from .bnbank import BNBank
from .config import Config
from .datagen import DomainData, Split, iterate_batches, make_domain_sequence
from .errors import DataError, LedgerError
from .evaluation import accuracy
from .masks import Mask, MaskLedger
from .network import BNLayer, Network, init_network
from .optim import OptimizerState, sgd_step, zero_grad
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

MetricsSink = Callable[[dict], None]

_PHASE_CODES = {"source": 0, "source_finetune": 1, "adapt": 2, "finetune": 3, "baseline": 4}


@dataclass
class PacdaState:
    """Everything a checkpoint holds."""

    config: Config
    net: Network
    ledger: MaskLedger
    bank: BNBank

    @property
    def domains_done(self) -> int:
        return len(self.ledger)

    @classmethod
    def fresh(cls, config: Config) -> PacdaState:
        net = init_network(config.arch(), config.seed)
        return cls(config, net, MaskLedger.for_network(net), BNBank())


@dataclass
class SequenceResult:
    post_accuracy: dict[int, float] = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)
    checkpoint: str | None = None


def make_data(config: Config) -> list[DomainData]:
    return make_domain_sequence(config.seed, config.domain_specs(), config.num_classes,
                                config.mean_separation, config.rotated_pairs)


def phase_rng(config: Config, domain: int, phase: str) -> np.random.Generator:
    # independent stream per (domain, phase) so resumed runs replay exactly
    return np.random.default_rng([config.seed, domain, _PHASE_CODES[phase]])


def evaluate(net: Network, split: Split, mask: Mask | None = None, bn_source=None) -> float:
    was_training = [bn.training for bn in net.bn_layers().values()]
    net.eval()
    try:
        with no_grad():
            logits = net.forward(split.inputs, mask, bn_source=bn_source).data
    finally:
        for bn, flag in zip(net.bn_layers().values(), was_training):
            bn.training = flag
    return accuracy(logits, split.labels)


def _adaptation_params(net: Network) -> dict[str, Tensor]:
    """Prunable weights plus BN affine terms; classifier and biases stay fixed."""
    params = net.parameters()
    names = list(net.prunable)
    names += [n for n in params if ".bn." in n]
    return {n: params[n] for n in names}


def run_epochs(
    net: Network,
    split: Split,
    *,
    epochs: int,
    params: dict[str, Tensor],
    opt: OptimizerState,
    objective: str,
    config: Config,
    rng: np.random.Generator,
    grad_mask: Mask | None = None,
    phase: str,
    domain: int,
    sink: MetricsSink | None = None,
    eval_split: Split | None = None,
) -> list[dict]:
    """Train in place for ``epochs``; one metrics record per epoch.

    ``objective`` is ``"ce"`` (labels used) or ``"im"`` (labels never read;
    only the logged accuracy consults them).
    """
    if len(split) == 0:
        raise DataError("empty training split")
    loss_cfg = config.loss()
    all_params = net.parameters()
    records = []
    for epoch in range(epochs):
        net.train()
        total, seen = 0.0, 0
        for batch in iterate_batches(split, config.batch_size, rng):
            zero_grad(all_params)
            logits = net.forward(batch.inputs)
            if objective == "ce":
                loss = losses.label_smoothed_ce(logits, batch.labels, loss_cfg.smoothing_alpha)
            else:
                loss = losses.im_loss(logits, loss_cfg.im_div_weight)
            loss.backward()
            sgd_step(params, opt, grad_mask)
            total += loss.item() * len(batch.labels)
            seen += len(batch.labels)
        zero_grad(all_params)
        rec = {
            "phase": phase,
            "domain": domain,
            "epoch": epoch,
            "loss": total / seen,
            "accuracy": evaluate(net, eval_split if eval_split is not None else split),
        }
        records.append(rec)
        if sink is not None:
            sink(rec)
    net.train()
    return records


def train_source(state: PacdaState, source: DomainData, sink: MetricsSink | None = None) -> float:
    """Supervised training, L1 selection of ``M_0``, masked fine-tune, BN snapshot 0.

    Returns post-fine-tune test accuracy.
    """
    cfg, net, ledger, bank = state.config, state.net, state.ledger, state.bank
    if len(source.train) == 0:
        raise DataError("empty source dataset")
    if len(ledger) != 0:
        raise LedgerError("source training needs an empty ledger")
    params = net.parameters()

    opt = OptimizerState(cfg.lr_source, cfg.momentum, cfg.weight_decay)
    run_epochs(net, source.train, epochs=cfg.n_epochs_train, params=params, opt=opt, objective="ce",
               config=cfg, rng=phase_rng(cfg, 0, "source"), phase="source", domain=0, sink=sink)

    ledger.extend(net, cfg.keep[0])
    opt.reset()
    run_epochs(net, source.train, epochs=cfg.n_epochs_finetune, params=params, opt=opt, objective="ce",
               config=cfg, rng=phase_rng(cfg, 0, "source_finetune"), grad_mask=ledger.gradient_mask(0, "finetune"),
               phase="source_finetune", domain=0, sink=sink)

    bank.snapshot(net, 0)
    bank.record_source(net)
    acc = evaluate(net, source.test, ledger.mask(0), bank.entry(0))
    log.info("source: test accuracy %.4f after keeping %.3f of prunable weights", acc, cfg.keep[0])
    return acc


def _reset_bn(state: PacdaState) -> None:
    if state.config.bn_reset == "source":
        state.bank.reset_to_source(state.net)
        return
    arch = state.config.arch()
    for name, bn in state.net.bn_layers().items():
        bn.load(BNLayer.fresh(bn.gamma.shape[0], arch.bn_momentum, arch.bn_eps, name).state())


def _reinit_free(state: PacdaState, t: int) -> None:
    net, ledger = state.net, state.ledger
    rng = np.random.default_rng([state.config.seed, t, 99])
    params = net.parameters()
    for name, free in ledger.gradient_mask(t, "adapt").items():
        w = params[name]
        bound = 1.0 / np.sqrt(w.shape[0])
        w.data = np.where(free, rng.uniform(-bound, bound, size=w.shape), w.data)


def adapt_domain(state: PacdaState, target: DomainData, t: int, sink: MetricsSink | None = None) -> float:
    """Adapt to unlabeled target domain ``t``; returns post-training test accuracy.

    Weights claimed by domains ``< t`` and the classifier are never modified.
    """
    cfg, net, ledger, bank = state.config, state.net, state.ledger, state.bank
    if t < 1:
        raise LedgerError("target domains are numbered from 1")
    if len(ledger) != t:
        raise LedgerError(f"adapting domain {t} needs masks for domains 0..{t - 1}, ledger holds {len(ledger)}")
    if t >= len(cfg.keep):
        raise LedgerError(f"no keep fraction configured for domain {t}")

    _reset_bn(state)
    if cfg.reinit_free_weights:
        _reinit_free(state, t)
    params = _adaptation_params(net)

    opt = OptimizerState(cfg.lr_adapt, cfg.momentum, cfg.weight_decay)
    run_epochs(net, target.train, epochs=cfg.n_epochs_train, params=params, opt=opt, objective="im",
               config=cfg, rng=phase_rng(cfg, t, "adapt"), grad_mask=ledger.gradient_mask(t, "adapt"),
               phase="adapt", domain=t, sink=sink)

    ledger.extend(net, cfg.keep[t])
    opt.reset()
    run_epochs(net, target.train, epochs=cfg.n_epochs_finetune, params=params, opt=opt, objective="im",
               config=cfg, rng=phase_rng(cfg, t, "finetune"), grad_mask=ledger.gradient_mask(t, "finetune"),
               phase="finetune", domain=t, sink=sink)

    bank.snapshot(net, t)
    acc = evaluate(net, target.test, ledger.mask(t), bank.entry(t))
    log.info("domain %d: test accuracy %.4f", t, acc)
    return acc


def run_sequence(
    state: PacdaState,
    data: list[DomainData] | None = None,
    sink: MetricsSink | None = None,
    on_domain_end: Callable[[PacdaState, int], None] | None = None,
    stop_after: int | None = None,
) -> SequenceResult:
    """Source training followed by every target domain, resuming from ``state``.

    ``on_domain_end`` runs after each domain (checkpointing hooks in here);
    ``stop_after`` ends the run once that domain index is done.
    """
    data = make_data(state.config) if data is None else data
    result = SequenceResult()

    def record(rec: dict) -> None:
        result.records.append(rec)
        if sink is not None:
            sink(rec)

    last = len(data) - 1 if stop_after is None else min(stop_after, len(data) - 1)
    for t in range(state.domains_done, last + 1):
        if t == 0:
            acc = train_source(state, data[0], record)
        else:
            acc = adapt_domain(state, data[t], t, record)
        result.post_accuracy[t] = acc
        if on_domain_end is not None:
            on_domain_end(state, t)
    return result


@dataclass
class BaselineResult:
    post_accuracy: dict[int, float]
    final_accuracy: dict[int, float]

    def forgetting(self) -> dict[int, float]:
        return {d: self.final_accuracy[d] - self.post_accuracy[d] for d in self.post_accuracy}


def run_baseline(config: Config, data: list[DomainData] | None = None, sink: MetricsSink | None = None) -> BaselineResult:
    """Sequential IM adaptation without masks or a BN bank.

    The source model is trained on all weights; every target domain then
    updates the whole encoder (classifier frozen) for the same number of
    epochs PaCDA spends on it, and BN statistics carry over between domains.
    """
    data = make_data(config) if data is None else data
    net = init_network(config.arch(), config.seed)
    params = net.parameters()
    opt = OptimizerState(config.lr_source, config.momentum, config.weight_decay)
    run_epochs(net, data[0].train, epochs=config.n_epochs_train + config.n_epochs_finetune, params=params,
               opt=opt, objective="ce", config=config, rng=phase_rng(config, 0, "baseline"),
               phase="baseline_source", domain=0, sink=sink)
    post = {0: evaluate(net, data[0].test)}

    encoder = {n: p for n, p in params.items() if not n.startswith(net.classifier.name + ".")}
    for t in range(1, len(data)):
        opt = OptimizerState(config.lr_adapt, config.momentum, config.weight_decay)
        run_epochs(net, data[t].train, epochs=config.n_epochs_train + config.n_epochs_finetune, params=encoder,
                   opt=opt, objective="im", config=config, rng=phase_rng(config, t, "baseline"),
                   phase="baseline_adapt", domain=t, sink=sink)
        post[t] = evaluate(net, data[t].test)
    final = {t: evaluate(net, data[t].test) for t in range(len(data))}
    return BaselineResult(post, final)


def train_dense(config: Config, source: DomainData, sink: MetricsSink | None = None) -> Network:
    """Plain supervised training of every parameter, no pruning."""
    net = init_network(config.arch(), config.seed)
    opt = OptimizerState(config.lr_source, config.momentum, config.weight_decay)
    run_epochs(net, source.train, epochs=config.n_epochs_train, params=net.parameters(), opt=opt,
               objective="ce", config=config, rng=phase_rng(config, 0, "source"), phase="source",
               domain=0, sink=sink)
    return net
