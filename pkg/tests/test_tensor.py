import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpcn.tensor import (
    Precision, ShapeError, add, concat_channels, crop_spatial, flat_index,
    pad_to_multiple, scale, split_channels, sub, tensor_new,
)


@pytest.mark.parametrize("shape,fill", [((2, 2, 1), 0.0), ((1, 1, 4), 1.0), ((3, 2, 2), 0.5)])
def test_tensor_new_fills(shape, fill):
    t = tensor_new(shape, fill)
    assert t.shape == shape
    assert t.size == np.prod(shape)
    assert np.all(t == fill)


@pytest.mark.parametrize("shape", [(0, 2, 1), (2, -1, 1), (2, 2)])
def test_tensor_new_rejects_bad_shape(shape):
    with pytest.raises(ShapeError):
        tensor_new(shape)


def test_precision_dtypes():
    assert Precision.TEST.dtype == np.float64
    assert Precision.TRAIN.dtype == np.float32


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_flat_index_is_a_bijection(h, w, c):
    t = np.arange(h * w * c, dtype=float).reshape(h, w, c)
    seen = set()
    for x in range(h):
        for y in range(w):
            for ch in range(c):
                i = flat_index((h, w, c), x, y, ch)
                assert t.reshape(-1)[i] == t[x, y, ch]
                seen.add(i)
    assert seen == set(range(h * w * c))


def test_concat_channels_order():
    a, b = np.full((1, 1, 1), 3.0), np.full((1, 1, 1), 7.0)
    assert concat_channels([a, b]).reshape(-1).tolist() == [3.0, 7.0]


def test_concat_four_replica_maps():
    parts = [np.random.default_rng(i).normal(size=(12, 10, 16)) for i in range(4)]
    out = concat_channels(parts)
    assert out.shape == (12, 10, 64)
    for i, p in enumerate(parts):
        assert np.array_equal(out[..., 16 * i:16 * (i + 1)], p)


def test_concat_single_part_identity():
    t = np.random.default_rng(0).normal(size=(3, 4, 5))
    assert np.array_equal(concat_channels([t]), t)


def test_concat_errors():
    with pytest.raises(ValueError):
        concat_channels([])
    with pytest.raises(ShapeError):
        concat_channels([np.zeros((2, 2, 1)), np.zeros((2, 3, 1))])


@given(st.lists(st.integers(1, 4), min_size=1, max_size=5), st.integers(0, 2**31))
def test_split_concat_round_trip(sizes, seed):
    t = np.random.default_rng(seed).normal(size=(3, 2, sum(sizes)))
    assert np.array_equal(concat_channels(split_channels(t, sizes)), t)


def test_arithmetic_identities():
    x = np.random.default_rng(1).normal(size=(4, 3, 2))
    assert np.array_equal(add(x, np.zeros_like(x)), x)
    assert np.array_equal(scale(x, 1.0), x)
    assert np.array_equal(sub(x, x), np.zeros_like(x))
    with pytest.raises(ShapeError):
        add(x, np.zeros((4, 3, 1)))


def test_add_commutes_bit_exactly():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(5, 5, 3)), rng.normal(size=(5, 5, 3))
    assert np.array_equal(add(a, b), add(b, a))


def test_pad_already_aligned():
    t = np.arange(16.0).reshape(4, 4, 1)
    p, orig = pad_to_multiple(t, 4)
    assert np.array_equal(p, t) and orig == (4, 4, 1)


def test_pad_replicates_last_row():
    t = np.arange(20.0).reshape(5, 4, 1)
    p, orig = pad_to_multiple(t, 4)
    assert p.shape == (8, 4, 1) and orig == (5, 4, 1)
    for row in range(5, 8):
        assert np.array_equal(p[row], t[4])


def test_pad_single_pixel():
    p, _ = pad_to_multiple(np.full((1, 1, 1), 2.5), 4)
    assert p.shape == (4, 4, 1) and np.all(p == 2.5)


def test_crop_index_arithmetic():
    t = np.arange(16.0).reshape(4, 4, 1)
    assert crop_spatial(t, (2, 2, 1)).reshape(-1).tolist() == [0, 1, 4, 5]
    assert np.array_equal(crop_spatial(t, t.shape), t)
    with pytest.raises(ShapeError):
        crop_spatial(t, (5, 4, 1))


@settings(max_examples=50)
@given(st.integers(1, 13), st.integers(1, 13), st.integers(1, 3), st.integers(1, 8), st.integers(0, 2**31))
def test_pad_crop_round_trip(h, w, c, m, seed):
    t = np.random.default_rng(seed).normal(size=(h, w, c))
    p, orig = pad_to_multiple(t, m)
    assert p.shape[0] % m == 0 and p.shape[1] % m == 0
    assert np.array_equal(crop_spatial(p, orig), t)
