import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedmatch.comm import CostLedger, SparseDelta, apply, delta_from_bytes, diff
from fedmatch.errors import CorruptDeltaError


class TestDiff:
    def test_identical_vectors_empty_delta(self):
        v = np.array([1.0, -2.0, 3.0])
        d = diff(v, v, 1e-5)
        assert d.n_entries == 0

    def test_threshold_drops_tiny_changes(self):
        ref = np.array([1.0, 2.0, 3.0])
        local = np.array([1.0, 2.5, 3.000004])
        d = diff(local, ref, 1e-5)
        assert d.indices.tolist() == [1]  # only the 0.5 change survives
        assert apply(ref, d).tolist() == [1.0, 2.5, 3.0]

    def test_zero_threshold_covers_every_differing_index(self):
        ref = np.array([1.0, 2.0, 3.0, 4.0])
        local = np.array([1.0, 2.1, 3.0, 4.1])
        d = diff(local, ref, 0.0)
        assert d.indices.tolist() == [1, 3]

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            diff(np.zeros(3), np.zeros(4), 0.0)

    def test_matching_zeros_never_grow_delta(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ref = rng.normal(size=50)
            local = ref + rng.normal(scale=1e-4, size=50)
            base = diff(local, ref, 2e-5).n_entries
            idx = rng.choice(50, size=20, replace=False)
            ref2, local2 = ref.copy(), local.copy()
            ref2[idx] = 0.0
            local2[idx] = 0.0
            assert diff(local2, ref2, 2e-5).n_entries <= base


class TestApply:
    def test_empty_delta_is_identity(self):
        ref = np.array([1.0, 2.0])
        d = diff(ref, ref, 1e-5)
        assert np.array_equal(apply(ref, d), ref)

    def test_round_trip_error_bounded_by_threshold(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(1, 200))
            ref = rng.normal(size=n)
            local = ref + rng.normal(scale=1e-4, size=n)
            t = float(rng.uniform(1e-5, 5e-5))
            recon = apply(ref, diff(local, ref, t))
            assert np.max(np.abs(recon - local)) <= t

    def test_zero_threshold_is_lossless(self):
        rng = np.random.default_rng(2)
        ref = rng.normal(size=100)
        local = rng.normal(size=100)
        recon = apply(ref, diff(local, ref, 0.0))
        assert np.array_equal(recon, local)

    def test_rejects_wrong_reference_length(self):
        d = diff(np.ones(4), np.zeros(4), 0.0)
        with pytest.raises(CorruptDeltaError):
            apply(np.zeros(5), d)

    @given(
        hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-10, 10)),
        hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-10, 10)),
        st.floats(0.0, 1e-4),
    )
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, a, b, t):
        n = min(a.shape[0], b.shape[0])
        local, ref = a[:n], b[:n]
        recon = apply(ref, diff(local, ref, t))
        assert np.max(np.abs(recon - local), initial=0.0) <= t


class TestSparseDeltaInvariants:
    def test_rejects_out_of_range_index(self):
        with pytest.raises(CorruptDeltaError):
            SparseDelta(np.array([5]), np.array([1.0]), dense_len=3, threshold=0.0)

    def test_rejects_unsorted_indices(self):
        with pytest.raises(CorruptDeltaError):
            SparseDelta(np.array([2, 1]), np.array([1.0, 1.0]), dense_len=4, threshold=0.0)


class TestSerialization:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(3)
        local = rng.normal(size=64)
        ref = local + rng.normal(scale=1e-4, size=64)
        d = diff(local, ref, 2e-5)
        buf = d.to_bytes()
        back = delta_from_bytes(buf)
        assert back.dense_len == d.dense_len
        assert np.array_equal(back.indices, d.indices)
        assert back.values.tobytes() == d.values.tobytes()
        assert back.to_bytes() == buf

    def test_empty_delta_serializes(self):
        d = diff(np.ones(8), np.ones(8), 1e-5)
        back = delta_from_bytes(d.to_bytes())
        assert back.n_entries == 0
        assert back.dense_len == 8

    def test_rejects_truncated_record(self):
        d = diff(np.ones(4), np.zeros(4), 0.0)
        with pytest.raises(CorruptDeltaError):
            delta_from_bytes(d.to_bytes()[:-3])

    def test_rejects_short_header(self):
        with pytest.raises(CorruptDeltaError):
            delta_from_bytes(b"\x01\x02")


class TestCostLedger:
    def test_no_transmissions_zero_percent(self):
        ledger = CostLedger()
        ledger.open_round(1, s2c_dense=100, c2s_dense=100)
        assert ledger.current.s2c_pct == 0.0
        assert ledger.current.c2s_pct == 0.0

    def test_full_dense_is_hundred_percent(self):
        ledger = CostLedger()
        ledger.open_round(1, s2c_dense=50, c2s_dense=50)
        ledger.record_dense("s2c", 50)
        ledger.record_dense("c2s", 50)
        assert ledger.current.s2c_pct == 100.0
        assert ledger.current.c2s_pct == 100.0

    def test_46_of_100(self):
        ledger = CostLedger()
        ledger.open_round(1, s2c_dense=100, c2s_dense=100)
        d = diff(np.arange(100, dtype=float), np.zeros(100), 0.0)
        assert d.n_entries == 99  # index 0 did not change
        partial = SparseDelta(d.indices[:46], d.values[:46], 100, 0.0)
        ledger.record_round("c2s", [partial])
        assert ledger.current.c2s_pct == 46.0

    def test_helper_entries_count_into_s2c(self):
        ledger = CostLedger()
        ledger.open_round(1, s2c_dense=100, c2s_dense=100)
        d = diff(np.ones(10), np.zeros(10), 0.0)
        ledger.record_round("s2c", [d], helper_deltas=[d, d])
        assert ledger.current.s2c_entries == 10
        assert ledger.current.helper_entries == 20
        assert ledger.current.s2c_pct == 30.0

    def test_helpers_rejected_on_uplink(self):
        ledger = CostLedger()
        ledger.open_round(1, 10, 10)
        d = diff(np.ones(2), np.zeros(2), 0.0)
        with pytest.raises(ValueError):
            ledger.record_round("c2s", [], helper_deltas=[d])

    def test_rejects_unknown_direction(self):
        ledger = CostLedger()
        ledger.open_round(1, 10, 10)
        with pytest.raises(ValueError):
            ledger.record_round("sideways", [])


class TestDeltaMeanComposition:
    def test_aggregate_of_reconstructions_tracks_true_mean(self):
        # two clients with hand-set trained parameters: the mean of the
        # server reconstructions stays within the threshold of the true mean
        rng = np.random.default_rng(4)
        t = 2e-5
        ref1, ref2 = rng.normal(size=30), rng.normal(size=30)
        true1 = ref1 + rng.normal(scale=5e-5, size=30)
        true2 = ref2 + rng.normal(scale=5e-5, size=30)
        recon1 = apply(ref1, diff(true1, ref1, t))
        recon2 = apply(ref2, diff(true2, ref2, t))
        agg = (recon1 + recon2) / 2.0
        assert np.max(np.abs(agg - (true1 + true2) / 2.0)) <= t
