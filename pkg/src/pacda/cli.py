"""Command-line entry point: ``pacda <subcommand> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config
from .datagen import read_split, sequential_batches, write_split
from .errors import LedgerError, PacdaError
from .evaluation import accuracy, as_points, cross_mask_matrix, forgetting_delta, pruning_curve, routing_report
from .router import predict_with_domain_id, route_batch
from .trainer import PacdaState, adapt_domain, make_data, run_sequence, train_dense, train_source

log = logging.getLogger("pacda")

CHECKPOINT = "checkpoint.pacda"
METRICS = "metrics.jsonl"
SEQUENCE = "sequence.json"


class MetricsLog:
    """Append-only JSON-lines log."""

    def __init__(self, path: Path, command: str):
        self.path = path
        self.command = command
        path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps({"command": self.command, **record}, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_state(args) -> PacdaState:
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else Path(args.out) / CHECKPOINT
    return load_checkpoint(path)


def _record_post(out: Path, post: dict[int, float]) -> None:
    path = out / SEQUENCE
    prior = json.loads(path.read_text()) if path.exists() else {}
    prior.setdefault("post_accuracy", {}).update({str(k): v for k, v in post.items()})
    path.write_text(json.dumps(prior, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    data_dir = _out(args) / "data"
    data_dir.mkdir(exist_ok=True)
    for t, d in enumerate(make_data(cfg)):
        for split_name, split in (("train", d.train), ("test", d.test)):
            path = data_dir / f"domain{t}_{split_name}.bin"
            write_split(path, split)
            print(f"{path}\t{len(split)} samples\t{split.inputs.shape[1]} features")
    return 0


def cmd_train_source(args) -> int:
    cfg = _config(args)
    out = _out(args)
    state = PacdaState.fresh(cfg)
    acc = train_source(state, make_data(cfg)[0], MetricsLog(out / METRICS, "train-source"))
    save_checkpoint(out / CHECKPOINT, state)
    _record_post(out, {0: acc})
    print(f"domain 0 (source): accuracy {as_points(acc):.1f}")
    return 0


def cmd_adapt(args) -> int:
    out = _out(args)
    state = _load_state(args)
    t = state.domains_done
    if args.domain is not None and args.domain != t:
        raise LedgerError(f"checkpoint expects domain {t} next, not {args.domain}")
    data = make_data(state.config)
    if t >= len(data):
        raise LedgerError(f"all {len(data)} domains are already adapted")
    acc = adapt_domain(state, data[t], t, MetricsLog(out / METRICS, "adapt"))
    save_checkpoint(out / CHECKPOINT, state)
    _record_post(out, {t: acc})
    print(f"domain {t}: accuracy {as_points(acc):.1f}")
    return 0


def cmd_run_sequence(args) -> int:
    out = _out(args)
    ckpt = out / CHECKPOINT
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt)
        log.info("resuming after %d domains", state.domains_done)
    else:
        state = PacdaState.fresh(_config(args))

    def on_end(s: PacdaState, t: int) -> None:
        save_checkpoint(ckpt, s)

    result = run_sequence(state, sink=MetricsLog(out / METRICS, "run-sequence"), on_domain_end=on_end)
    _record_post(out, result.post_accuracy)
    for t, acc in sorted(result.post_accuracy.items()):
        print(f"domain {t}: accuracy {as_points(acc):.1f}")
    return 0


def cmd_infer(args) -> int:
    state = _load_state(args)
    if args.input:
        splits = [read_split(args.input)]
    else:
        splits = [d.test for d in make_data(state.config)][: state.domains_done]
    bs = args.batch_size or state.config.route_batch_size
    for split in splits:
        for i, batch in enumerate(sequential_batches(split, bs)):
            if args.domain_id is not None:
                logits = predict_with_domain_id(batch.inputs, args.domain_id, state.net, state.ledger, state.bank)
                record = {"chosen_domain": args.domain_id, "bnsd_scores": None,
                          "predictions": logits.argmax(axis=1).tolist()}
            else:
                decision = route_batch(batch.inputs, state.net, state.ledger, state.bank)
                record, logits = decision.to_record(), decision.logits
            record.update(batch=i, data_domain=batch.domain_id,
                          accuracy=accuracy(logits, batch.labels))
            print(json.dumps(record, sort_keys=True))
    return 0


def cmd_eval_matrix(args) -> int:
    out = _out(args)
    state = _load_state(args)
    data = make_data(state.config)[: state.domains_done]
    matrix = cross_mask_matrix(state, data)
    report = routing_report(state, data, state.config.route_batch_size, seed=state.config.seed)
    print("accuracy (%) by mask/BN (rows) and data domain (columns)")
    print(matrix.to_table())
    print()
    print(f"{'domain':<8}{'routing':>10}{'routed':>10}{'domain-id':>11}{'after':>9}{'delta':>9}")
    seq = out / SEQUENCE
    post = json.loads(seq.read_text()).get("post_accuracy", {}) if seq.exists() else {}
    deltas = {}
    for d in range(len(data)):
        after = post.get(str(d))
        delta = None if after is None else forgetting_delta(report.oracle_accuracy[d], after)
        deltas[str(d)] = delta
        cells = [f"{100 * report.routing_accuracy[d]:>10.1f}", f"{as_points(report.routed_accuracy[d]):>10.1f}",
                 f"{as_points(report.oracle_accuracy[d]):>11.1f}",
                 f"{'-' if after is None else format(as_points(after), '.1f'):>9}",
                 f"{'-' if delta is None else format(as_points(delta), '+.1f'):>9}"]
        print(f"{d:<8}" + "".join(cells))
    payload = {"cross_mask": matrix.to_dict(), "routing": report.to_dict(), "forgetting": deltas}
    (out / "eval_matrix.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_pruning_curve(args) -> int:
    cfg = _config(args)
    out = _out(args)
    fractions = [float(f) for f in args.fractions.split(",")]
    source = make_data(cfg)[0]
    net = train_dense(cfg, source, MetricsLog(out / METRICS, "pruning-curve"))
    points = pruning_curve(net, source, fractions, cfg)
    print(f"{'pruned':>8}{'before ft':>11}{'after ft':>10}")
    for p in points:
        print(f"{100 * p.fraction:>7.1f}%{as_points(p.accuracy_pruned):>11.1f}{as_points(p.accuracy_finetuned):>10.1f}")
    (out / "pruning_curve.json").write_text(json.dumps(
        [{"fraction": p.fraction, "accuracy_pruned": p.accuracy_pruned, "accuracy_finetuned": p.accuracy_finetuned}
         for p in points], indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: ./pacda-out)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="pacda", parents=[common],
                                     description="Continual domain adaptation with pruning masks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "write the synthetic domain splits")
    add("train-source", cmd_train_source, "train the source model and select its weights")
    p = add("adapt", cmd_adapt, "adapt the checkpoint to its next domain")
    p.add_argument("--domain", type=int, help="expected domain index (checked)")
    p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.pacda)")
    p = add("run-sequence", cmd_run_sequence, "source training plus every target domain")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.pacda if present")
    p = add("infer", cmd_infer, "routed (or --domain-id) predictions per batch, one JSON line each")
    p.add_argument("--domain-id", type=int, help="skip routing and use this domain's mask and BN")
    p.add_argument("--input", help="split file written by gen-data (default: every domain's test split)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.pacda)")
    p = add("eval-matrix", cmd_eval_matrix, "cross-mask accuracy matrix, routing and forgetting")
    p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.pacda)")
    p = add("pruning-curve", cmd_pruning_curve, "accuracy versus L1 pruning fraction on the source domain")
    p.add_argument("--fractions", default="0,0.25,0.5,0.7,0.9,0.95,0.99")
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", "pacda-out"), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PacdaError as e:
        print(f"pacda: {e.category} error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"pacda: io error: {e}", file=sys.stderr)
        return 6


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
