import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pacda.errors import FormatError, LedgerError, ShapeError
from pacda.masks import (MaskLedger, check_zero_outside, keep_count, pack_bits, pack_masks, select_l1_mask,
                         unpack_bits, unpack_masks)


def weights_strategy(max_side=6):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return arrays(np.float64, shape, elements=st.floats(-2, 2, allow_nan=False))


class TestKeepCount:
    @pytest.mark.parametrize("n,keep,expected", [(10, 0.25, 3), (10, 0.24, 2), (4, 0.125, 1),
                                                 (7, 0.5, 4), (100, 1.0, 100), (5, 0.0, 0)])
    def test_round_half_up(self, n, keep, expected):
        assert keep_count(n, keep) == expected


class TestSelectL1:
    def test_largest_magnitudes(self):
        w = np.array([[0.1, -3.0], [2.0, 0.5]])
        np.testing.assert_array_equal(select_l1_mask(w, None, 0.5), [[False, True], [True, False]])

    def test_ties_go_to_lowest_index(self):
        w = np.array([1.0, -1.0, 1.0, 1.0])
        np.testing.assert_array_equal(select_l1_mask(w, None, 0.5), [True, True, False, False])

    def test_prior_bits_kept_even_if_small(self):
        w = np.array([0.0, 5.0, 4.0, 3.0])
        prior = np.array([True, False, False, False])
        np.testing.assert_array_equal(select_l1_mask(w, prior, 0.5), [True, True, False, False])

    def test_target_below_claimed(self):
        with pytest.raises(LedgerError):
            select_l1_mask(np.ones(4), np.array([True, True, True, False]), 0.25)

    def test_prior_shape_checked(self):
        with pytest.raises(ShapeError):
            select_l1_mask(np.ones(4), np.ones(3, dtype=bool), 0.5)

    @settings(max_examples=80, deadline=None)
    @given(weights_strategy(), st.floats(0, 1), st.floats(0, 1))
    def test_nesting_and_cardinality(self, w, a, b):
        lo, hi = sorted((a, b))
        m1 = select_l1_mask(w, None, lo)
        m2 = select_l1_mask(w, m1, hi)
        assert not np.any(m1 & ~m2)
        assert m2.sum() == keep_count(w.size, hi)
        # every newly chosen weight is at least as large as every free weight left out
        new, left = np.abs(w[m2 & ~m1]), np.abs(w[~m2])
        if new.size and left.size:
            assert new.min() >= left.max()


class TestLedger:
    def test_extend_zeroes_outside_and_nests(self, tiny_net):
        ledger = MaskLedger.for_network(tiny_net)
        for p in (0.25, 0.25, 0.25, 0.25):
            m = ledger.extend(tiny_net, p)
            check_zero_outside(tiny_net, m)
        ledger.check_invariants()
        assert all(m.all() for m in ledger.mask(3).values())
        assert ledger.budget_used == pytest.approx(1.0)

    def test_budget_exceeded(self, tiny_net):
        ledger = MaskLedger.for_network(tiny_net)
        ledger.extend(tiny_net, 0.6)
        with pytest.raises(LedgerError):
            ledger.extend(tiny_net, 0.5)

    def test_gradient_masks(self, tiny_net):
        ledger = MaskLedger.for_network(tiny_net)
        ledger.extend(tiny_net, 0.3)
        ledger.extend(tiny_net, 0.3)
        for name in ledger.shapes:
            m0, m1 = ledger.mask(0)[name], ledger.mask(1)[name]
            np.testing.assert_array_equal(ledger.gradient_mask(1, "adapt")[name], ~m0)
            np.testing.assert_array_equal(ledger.gradient_mask(1, "finetune")[name], m1 & ~m0)
            np.testing.assert_array_equal(ledger.gradient_mask(0, "finetune")[name], m0)
        with pytest.raises(LedgerError):
            ledger.gradient_mask(2, "finetune")

    def test_claimed_by_and_free_counts(self, tiny_net):
        ledger = MaskLedger.for_network(tiny_net)
        ledger.extend(tiny_net, 0.5)
        owners = ledger.claimed_by()
        free = ledger.free_counts()
        for name in ledger.shapes:
            assert set(np.unique(owners[name])) <= {-1, 0}
            assert free[name] == int((owners[name] == -1).sum())

    def test_missing_mask(self, tiny_net):
        with pytest.raises(LedgerError):
            MaskLedger.for_network(tiny_net).mask(0)

    def test_invariant_checker_catches_broken_nesting(self, tiny_net):
        ledger = MaskLedger.for_network(tiny_net)
        ledger.extend(tiny_net, 0.5)
        ledger.extend(tiny_net, 0.25)
        name = next(iter(ledger.shapes))
        m0 = ledger.masks[0][name]
        i = np.flatnonzero(m0.ravel())[0]
        j = np.flatnonzero(~ledger.masks[1][name].ravel())[0]
        m1 = ledger.masks[1][name].ravel().copy()
        m1[i], m1[j] = False, True
        ledger.masks[1][name] = m1.reshape(m0.shape)
        with pytest.raises(LedgerError):
            ledger.check_invariants()

    def test_zero_check_detects_leak(self, tiny_net):
        ledger = MaskLedger.for_network(tiny_net)
        m = ledger.extend(tiny_net, 0.5)
        w = tiny_net.parameters()["fc0.weight"]
        w.data[~m["fc0.weight"]] = 1.0
        with pytest.raises(LedgerError):
            check_zero_outside(tiny_net, m)


class TestBitPacking:
    def test_little_bit_order(self):
        assert pack_bits(np.array([1, 0, 0, 0, 0, 0, 0, 0, 1], dtype=bool)) == b"\x01\x01"

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.booleans(), max_size=70))
    def test_roundtrip(self, bits):
        bits = np.array(bits, dtype=bool)
        np.testing.assert_array_equal(unpack_bits(pack_bits(bits), bits.size), bits)

    def test_ledger_roundtrip(self, tiny_net):
        ledger = MaskLedger.for_network(tiny_net)
        ledger.extend(tiny_net, 0.4)
        ledger.extend(tiny_net, 0.35)
        back = unpack_masks(pack_masks(ledger))
        assert back.shapes == ledger.shapes and back.keep_fractions == ledger.keep_fractions
        for a, b in zip(ledger.masks, back.masks):
            for name in a:
                np.testing.assert_array_equal(a[name], b[name])
        back.check_invariants()

    def test_stream_size(self, tiny_net):
        ledger = MaskLedger.for_network(tiny_net)
        ledger.extend(tiny_net, 0.5)
        header = 4 + struct.calcsize("<HII")
        names = sum(2 + len(n) + 1 + 8 * 2 + 8 for n in ledger.shapes)
        bits = sum(math.ceil(math.prod(s) / 8) for s in ledger.shapes.values())
        assert len(pack_masks(ledger)) == header + names + 8 + bits

    @pytest.mark.parametrize("corrupt", [lambda b: b[:-1], lambda b: b + b"\x00",
                                         lambda b: b"XMSK" + b[4:], lambda b: b[:4] + b"\x09\x00" + b[6:]])
    def test_corruption_detected(self, tiny_net, corrupt):
        ledger = MaskLedger.for_network(tiny_net)
        ledger.extend(tiny_net, 0.5)
        with pytest.raises(FormatError):
            unpack_masks(corrupt(pack_masks(ledger)))
