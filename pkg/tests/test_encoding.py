import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laserodom.encoding import (
    BIN_WIDTH,
    N_BINS,
    RECORD_SIZE,
    EncodedScan,
    EncoderConfig,
    RawScan,
    azimuth_to_bin,
    decode_scan,
    deserialize_encoded,
    encode_scan,
    make_pair,
    read_encoded,
    serialize_encoded,
    stack_pairs,
    write_encoded,
)


def oracle_encode(az, depth, max_range):
    """Brute-force binning: binary search over edges built one by one, exact integer sums."""
    edges = np.array([k * (math.pi / 1800.0) for k in range(N_BINS + 1)])
    idx = np.searchsorted(edges, az, side="right") - 1
    idx = np.minimum(idx, N_BINS - 1)
    # depths >= 1 are integer multiples of 2**-52: split into two limbs so sums stay exact in int64
    ints = (depth * 2.0**52).astype(np.int64)
    assert np.all(ints.astype(np.float64) == depth * 2.0**52)
    hi = np.zeros(N_BINS, dtype=np.int64)
    lo = np.zeros(N_BINS, dtype=np.int64)
    np.add.at(hi, idx, ints >> 26)
    np.add.at(lo, idx, ints & ((1 << 26) - 1))
    counts = np.bincount(idx, minlength=N_BINS)
    out = np.zeros(N_BINS)
    for b in np.flatnonzero(counts):
        total = (int(hi[b]) << 26) + int(lo[b])
        s = float(Fraction(total, 1 << 52))  # correctly rounded sum
        out[b] = min(max(s / int(counts[b]), 0.0), max_range)
    return out


def random_scan(rng, n):
    az = rng.uniform(0.0, 2 * math.pi, n)
    # a share of the points sits exactly on bin edges to exercise ties
    on_edge = rng.random(n) < 0.1
    az[on_edge] = rng.integers(0, 3600, on_edge.sum()) * BIN_WIDTH
    depth = rng.uniform(1.0, 100.0, n)
    return RawScan(0, az, depth)


def test_encode_matches_oracle_small_batch():
    rng = np.random.default_rng(1)
    for n in (1, 2, 17, 5000):
        scan = random_scan(rng, n)
        got = encode_scan(scan).bins
        assert np.array_equal(got, oracle_encode(scan.azimuth, scan.depth, 80.0))


def test_bin_edges_go_to_higher_bin():
    az = np.array([0.0, BIN_WIDTH, 2 * BIN_WIDTH, 1799 * BIN_WIDTH, 3599 * BIN_WIDTH])
    assert azimuth_to_bin(az).tolist() == [0, 1, 2, 1799, 3599]
    below = np.nextafter(az[1:], 0.0)
    assert azimuth_to_bin(below).tolist() == [0, 1, 1798, 3598]


def test_wrapping_and_last_slot():
    assert azimuth_to_bin(np.array([-BIN_WIDTH / 2]))[0] == 3599
    assert azimuth_to_bin(np.array([2 * math.pi + BIN_WIDTH * 0.5]))[0] == 0
    # a tiny negative azimuth wraps to exactly 2*pi and lands in the final slot
    assert azimuth_to_bin(np.array([-1e-300]))[0] == N_BINS - 1


def test_mean_and_clamp():
    scan = RawScan(3, np.array([0.1, 0.2, 5.5]) * BIN_WIDTH, np.array([2.0, 4.0, 500.0]))
    enc = encode_scan(scan, EncoderConfig(max_range=80.0))
    assert enc.frame_index == 3
    assert enc.bins[0] == 3.0
    assert enc.bins[5] == 80.0
    assert np.count_nonzero(enc.bins) == 2


def test_empty_scan_is_all_zero():
    enc = encode_scan(RawScan(0, np.zeros(0), np.zeros(0)))
    assert enc.bins.shape == (N_BINS,) and not enc.bins.any()


def test_invalid_scan_rejected():
    with pytest.raises(ValueError):
        encode_scan(RawScan(0, np.array([0.1]), np.array([float("nan")])))
    with pytest.raises(ValueError):
        encode_scan(RawScan(0, np.array([0.1]), np.array([-1.0])))
    with pytest.raises(ValueError):
        EncodedScan(0, np.zeros(10))


@given(st.integers(0, 2**32 - 1), st.integers(1, 400))
def test_encoding_is_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    scan = random_scan(rng, n)
    perm = rng.permutation(n)
    shuffled = RawScan(0, scan.azimuth[perm], scan.depth[perm])
    assert np.array_equal(encode_scan(scan).bins, encode_scan(shuffled).bins)


@given(st.integers(0, 2**32 - 1), st.integers(1, 400))
def test_encoded_values_bounded(seed, n):
    rng = np.random.default_rng(seed)
    enc = encode_scan(random_scan(rng, n), EncoderConfig(50.0))
    assert np.all(enc.bins >= 0) and np.all(enc.bins <= 50.0)
    assert np.count_nonzero(enc.bins) <= n


def test_decode_then_encode_is_fixed_point():
    rng = np.random.default_rng(2)
    enc = encode_scan(random_scan(rng, 3000))
    again = encode_scan(decode_scan(enc))
    assert np.array_equal(enc.bins, again.bins)


def test_points_xy_round_trip():
    rng = np.random.default_rng(3)
    scan = random_scan(rng, 50)
    back = RawScan.from_points_xy(0, scan.points_xy())
    assert np.allclose(back.depth, scan.depth)
    assert np.allclose(np.cos(back.azimuth - scan.azimuth), 1.0)


def test_make_pair_layout_and_consecutive_check():
    a = EncodedScan(4, np.full(N_BINS, 40.0))
    b = EncodedScan(5, np.full(N_BINS, 20.0))
    pair = make_pair(a, b, EncoderConfig(80.0))
    assert pair.data.shape == (2, N_BINS)
    assert pair.frame_index == 5
    assert np.all(pair.data[0] == 0.5) and np.all(pair.data[1] == 0.25)
    with pytest.raises(ValueError):
        make_pair(a, EncodedScan(7, np.zeros(N_BINS)))


def test_stack_pairs_matches_make_pair():
    rng = np.random.default_rng(4)
    frames = [EncodedScan(i, rng.uniform(0, 80, N_BINS)) for i in range(4)]
    stacked = stack_pairs(frames)
    assert stacked.shape == (3, 2, N_BINS)
    for i in range(3):
        assert np.array_equal(stacked[i], make_pair(frames[i], frames[i + 1]).data)


def test_cache_record_round_trip(tmp_path):
    bins = np.zeros(N_BINS)
    bins[[0, 17, 3600]] = [1.5, 79.25, 3.0]
    enc = EncodedScan(42, bins)
    data = serialize_encoded(enc)
    assert len(data) == RECORD_SIZE == 4 + 4 * N_BINS
    assert int.from_bytes(data[:4], "little") == 42
    assert deserialize_encoded(data) == enc
    write_encoded(tmp_path / "x.scan", enc)
    assert read_encoded(tmp_path / "x.scan") == enc
    with pytest.raises(ValueError):
        deserialize_encoded(data[:-1])
