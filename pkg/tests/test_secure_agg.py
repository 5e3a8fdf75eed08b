import numpy as np
import pytest

from ghofl.client_stats import StatsRequest, compute_bundle
from ghofl.datamodel import sum_bundles
from ghofl.partition import PartitionSpec, make_partition
from ghofl.secure_agg import (
    SCALE,
    DropoutDetected,
    MaskedBundle,
    RosterError,
    encode_fixed,
    mask,
    quantize,
    secure_sum,
    sum_masked,
    unseal,
)

from conftest import random_set

FULL = StatsRequest(want_B=True, want_S=True, want_D=True, want_M34=True)


def _shards(U, seed, n=None, req=FULL):
    data = random_set(n or max(8 * U, 40), 3, 3, seed=seed)
    parts = make_partition(data, PartitionSpec.iid(U, seed))
    return [compute_bundle(data.subset(p), req) for p in parts]


def _assert_exact(a, b):
    np.testing.assert_array_equal(a.counts, b.counts)
    for name in ("first_moments",) + a.present():
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


class TestMasking:
    def test_singleton_roster_is_identity(self):
        (b,) = _shards(1, 0)
        m = mask(b, 0, [0], round_seed=9)
        np.testing.assert_array_equal(m.lanes, encode_fixed(b))
        _assert_exact(unseal(m, [0]), quantize(b))

    def test_two_clients(self):
        b1, b2 = _shards(2, 1)
        total = mask(b1, 0, [0, 1], 5) + mask(b2, 1, [0, 1], 5)
        _assert_exact(unseal(total, [0, 1]), quantize(b1) + quantize(b2))

    def test_five_clients_vs_plain_sum(self):
        bundles = _shards(5, 2)
        got = secure_sum(bundles, round_seed=17)
        _assert_exact(got, sum_bundles([quantize(b) for b in bundles]))
        plain = sum_bundles(bundles)
        for name in ("first_moments",) + plain.present():
            np.testing.assert_allclose(getattr(got, name), getattr(plain, name), rtol=0, atol=5 * 0.5 / SCALE)

    def test_non_contiguous_client_ids(self):
        bundles = _shards(3, 3)
        roster = [4, 17, 99]
        total = sum_masked(mask(b, cid, roster, 1) for b, cid in zip(bundles, roster))
        _assert_exact(unseal(total, roster), sum_bundles([quantize(b) for b in bundles]))

    def test_dropout_detected(self):
        bundles = _shards(5, 4)
        roster = list(range(5))
        masked = [mask(b, u, roster, 3) for u, b in enumerate(bundles)]
        with pytest.raises(DropoutDetected):
            unseal(sum_masked(masked[:-1]), roster)

    def test_empty_roster(self):
        (b,) = _shards(1, 0)
        with pytest.raises(RosterError):
            mask(b, 0, [], 1)
        with pytest.raises(RosterError):
            mask(b, 3, [0, 1], 1)

    def test_overflow_guard(self):
        (b,) = _shards(1, 0, req=StatsRequest())
        big = b.with_fields(first_moments=b.first_moments * 1e15)
        with pytest.raises(OverflowError):
            encode_fixed(big)

    def test_frame_round_trip(self):
        b1, b2 = _shards(2, 6)
        m = mask(b1, 0, [0, 1], 8, round_id=3)
        back = MaskedBundle.from_bytes(m.to_bytes())
        np.testing.assert_array_equal(back.lanes, m.lanes)
        assert (back.client_id, back.round_id, back.round_seed) == (0, 3, 8)
        assert back.layout == m.layout


class TestOpacity:
    def test_masked_lane_uncorrelated_with_value(self):
        rng = np.random.default_rng(0)
        values, lanes, signs = [], [], []
        (b,) = _shards(1, 7, req=StatsRequest())
        for t in range(1000):
            v = rng.uniform(-1000, 1000)
            A = b.first_moments.copy()
            A[0, 0] = v
            m = mask(b.with_fields(first_moments=A), 0, [0, 1], round_seed=t)
            lane = int(m.lanes[b.class_count])
            values.append(v)
            lanes.append(lane)
            signs.append(lane > 0)
        r = np.corrcoef(values, np.asarray(lanes, dtype=float))[0, 1]
        assert abs(r) < 0.1
        # sign balance: a fair coin over 1000 trials stays within about 4 sigma of 500
        assert abs(sum(signs) - 500) < 65
