"""Shared fixtures: a fast config, one full default-suite run, and the
acceptance report printed at the end of the session."""

from __future__ import annotations

import copy

import numpy as np
import pytest

from pacda.checkpoint import encode
from pacda.config import Config
from pacda.masks import check_zero_outside
from pacda.network import ArchSpec, init_network
from pacda.tensor import no_grad
from pacda.trainer import PacdaState, make_data, run_sequence

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")


@pytest.fixture
def report():
    """Record one acceptance line; call as ``report(key, ok, detail)``."""

    def _report(key: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[key] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")

    return _report


SMALL = dict(n_epochs_train=3, n_epochs_finetune=2, n_train=400, n_test=200,
             hidden_widths=[24, 24], bottleneck_dim=12)


@pytest.fixture
def small_config() -> Config:
    """Same suite as the defaults, shrunk to run in well under a second per domain."""
    return Config(**SMALL)


@pytest.fixture
def tiny_arch() -> ArchSpec:
    return ArchSpec(input_dim=5, hidden_widths=[7, 6], bottleneck_dim=4, num_classes=3)


@pytest.fixture
def tiny_net(tiny_arch):
    return init_network(tiny_arch, seed=3)


class SequenceRun:
    """A completed default-suite run plus what was observed at each domain's end."""

    def __init__(self, config: Config):
        self.config = config
        self.data = make_data(config)
        self.state = PacdaState.fresh(config)
        self.params_at_end: dict[int, dict[str, np.ndarray]] = {}
        self.logits_at_end: dict[int, np.ndarray] = {}
        self.invariant_errors: list[str] = []
        self.checkpoint_at_end: dict[int, bytes] = {}

        def on_end(state: PacdaState, t: int) -> None:
            net, ledger = state.net, state.ledger
            self.checkpoint_at_end[t] = encode(state)
            self.params_at_end[t] = copy.deepcopy(net.state_dict())
            with no_grad():
                self.logits_at_end[t] = net.forward(self.data[t].test.inputs, ledger.mask(t),
                                                    bn_source=state.bank.entry(t)).data.copy()
            try:
                ledger.check_invariants()
                check_zero_outside(net, ledger.mask(t))
            except Exception as e:  # collected and asserted by the tests
                self.invariant_errors.append(f"domain {t}: {e}")

        self.result = run_sequence(self.state, self.data, on_domain_end=on_end)


@pytest.fixture(scope="session")
def default_run() -> SequenceRun:
    return SequenceRun(Config())


@pytest.fixture(scope="session")
def small_run() -> SequenceRun:
    return SequenceRun(Config(**SMALL))
