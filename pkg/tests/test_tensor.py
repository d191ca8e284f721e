import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bireal.tensor import BitTensor, dot_pm1, n_words, pack_bits, popcount_xnor, sign, sign_pack, unpack

shapes = st.lists(st.integers(1, 9), min_size=1, max_size=4).map(tuple)


@given(shapes.flatmap(lambda s: arrays(np.uint8, s, elements=st.integers(0, 1))))
def test_pack_roundtrip(bits):
    b = pack_bits(bits)
    assert b.words.size == n_words(bits.size)
    np.testing.assert_array_equal(b.bits(), bits)
    assert BitTensor.from_bytes(b.shape, b.to_bytes()) == b


@given(shapes.flatmap(lambda s: arrays(np.float64, s, elements=st.floats(-5, 5))))
def test_sign_pack_matches_sign(x):
    np.testing.assert_array_equal(unpack(sign_pack(x), np.float64), sign(x))


def test_sign_of_zero_is_plus_one():
    assert sign(np.array([0.0, -0.0]))[0] == 1
    assert sign(np.array([-0.0]))[0] == 1
    assert unpack(sign_pack(np.zeros(3)))[0] == 1


def test_bit_order_lsb_first():
    b = pack_bits(np.array([1, 0, 0, 1], dtype=np.uint8))
    assert int(b.words[0]) == 0b1001


def test_noncanonical_rejected():
    with pytest.raises(ValueError, match="trailing"):
        BitTensor((3,), np.array([0b1000], dtype=np.uint64))
    with pytest.raises(ValueError, match="words"):
        BitTensor((65,), np.zeros(1, dtype=np.uint64))


def test_words_read_only():
    b = pack_bits(np.ones(10, dtype=np.uint8))
    with pytest.raises(ValueError):
        b.words[0] = 0


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        sign_pack(np.array([1.0, np.nan]))


@settings(max_examples=200)
@given(st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_dot_pm1_matches_float(n, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(n), r.standard_normal(n)
    assert dot_pm1(sign_pack(a), sign_pack(b)) == int(sign(a) @ sign(b))


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_popcount_xnor(a, b):
    expected = sum(((a >> i) & 1) == ((b >> i) & 1) for i in range(64))
    assert popcount_xnor(a, b) == expected


def test_equality_and_hash():
    x = np.random.default_rng(0).standard_normal((2, 70))
    assert sign_pack(x) == sign_pack(x.copy())
    assert hash(sign_pack(x)) == hash(sign_pack(x.copy()))
    assert sign_pack(x) != sign_pack(-x)
