import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nexprune import bits


def naive_hamming(a_bits, b_bits):
    return sum(int(x) != int(y) for x, y in zip(a_bits, b_bits))


@given(st.integers(1, 200), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_pack_unpack_round_trip(p, n, seed):
    b = np.random.default_rng(seed).random((n, p)) < 0.5
    words = bits.pack_bits(b)
    assert words.shape == (n, bits.n_words(p))
    assert np.array_equal(bits.unpack_bits(words, p), b)


def test_trailing_bits_are_zero():
    words = bits.pack_bits(np.ones((1, 70), bool))
    assert int(words[0, 0]) == 2**64 - 1
    assert int(words[0, 1]) == 0b111111


def test_bit_order_is_little_endian():
    b = np.zeros(64, bool)
    b[3] = True
    assert int(bits.pack_bits(b[None])[0, 0]) == 8


@given(st.integers(1, 300), st.integers(0, 2**31 - 1))
def test_hamming_matches_per_bit_loop(p, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, p)) < 0.5
    got = bits.hamming(bits.pack_bits(a[None]), bits.pack_bits(b[None]))[0]
    assert got == naive_hamming(a, b)


def test_pairwise_dissimilarity_bounds_and_shape_check():
    a = bits.pack_bits(np.zeros((1, 10), bool))[0]
    b = bits.pack_bits(np.ones((1, 10), bool))[0]
    assert bits.pairwise_dissimilarity(a, b, 10) == 1.0
    assert bits.pairwise_dissimilarity(a, a, 10) == 0.0
    with pytest.raises(ValueError):
        bits.pairwise_dissimilarity(a, b, 100)


def test_binarize_is_strict_and_per_filter():
    act = np.array([[[[0.0, 1e-30]], [[-1.0, 2.0]]]], dtype=np.float32)  # (1, 2, 1, 2)
    w = bits.binarize(act)
    assert w.shape == (2, 1, 1)
    assert np.array_equal(bits.unpack_bits(w, 2), [[[False, True]], [[False, True]]])


@given(st.integers(2, 40), st.integers(1, 130), st.integers(0, 2**31 - 1))
def test_column_count_identity_equals_pair_loop(n, p, seed):
    rng = np.random.default_rng(seed)
    words = bits.pack_bits(rng.random((3, n, p)) < rng.random())
    assert np.array_equal(bits.upper_triangle_total(words), bits.column_count_total(words, p))


def test_pair_distances_order_and_total():
    rng = np.random.default_rng(0)
    raw = rng.random((5, 17)) < 0.5
    words = bits.pack_bits(raw)
    d = bits.pair_distances(words)
    expect = [naive_hamming(raw[i], raw[j]) for i in range(5) for j in range(i + 1, 5)]
    assert d.tolist() == expect
    assert d.sum() == bits.upper_triangle_total(words)
