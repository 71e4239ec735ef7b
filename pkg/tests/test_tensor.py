import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dban.tensor import (
    ShapeError,
    as_tensor,
    concat_channels,
    get_dtype,
    hadamard,
    pixelwise_add,
    precision,
    slice_channels,
    split_channels,
)


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


def test_concat_single_is_copy(rng):
    t = rand(rng, 1, 3, 4, 4)
    out = concat_channels([t])
    assert out is not t
    assert np.array_equal(out, t)


def test_concat_block_order(rng):
    a, b = rand(rng, 1, 16, 4, 4), rand(rng, 1, 16, 4, 4)
    out = concat_channels([a, b])
    assert out.shape == (1, 32, 4, 4)
    assert np.array_equal(out[:, :16], a)
    assert np.array_equal(out[:, 16:], b)


def test_concat_mismatch_names_index(rng):
    with pytest.raises(ShapeError, match="input 2"):
        concat_channels([rand(rng, 1, 2, 4, 4), rand(rng, 1, 1, 4, 4), rand(rng, 1, 1, 4, 5)])
    with pytest.raises(ShapeError):
        concat_channels([])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=5), st.integers(0, 2**32 - 1))
def test_concat_slice_round_trip(widths, seed):
    rng = np.random.default_rng(seed)
    parts = [rand(rng, 2, c, 3, 2) for c in widths]
    cat = concat_channels(parts)
    start = 0
    for p in parts:
        assert np.array_equal(slice_channels(cat, start, start + p.shape[1]), p)
        start += p.shape[1]
    assert all(np.array_equal(a, b) for a, b in zip(split_channels(cat, widths), parts))


def test_concat_associative(rng):
    a, b, c = rand(rng, 1, 2, 3, 3), rand(rng, 1, 3, 3, 3), rand(rng, 1, 1, 3, 3)
    assert np.array_equal(concat_channels([concat_channels([a, b]), c]), concat_channels([a, b, c]))


def test_slice_full_and_loop_oracle(rng):
    t = rand(rng, 2, 4, 3, 3)
    assert np.array_equal(slice_channels(t, 0, 4), t)
    expected = np.zeros((2, 2, 3, 3), dtype=np.float32)
    for n in range(2):
        for c in range(1, 3):
            for i in range(3):
                for j in range(3):
                    expected[n, c - 1, i, j] = t[n, c, i, j]
    assert np.array_equal(slice_channels(t, 1, 3), expected)


@pytest.mark.parametrize("bounds", [(-1, 2), (2, 2), (0, 5), (3, 1)])
def test_slice_bounds(rng, bounds):
    with pytest.raises(IndexError):
        slice_channels(rand(rng, 1, 4, 2, 2), *bounds)


def test_hadamard(rng):
    a, b = rand(rng, 1, 2, 3, 3), rand(rng, 1, 2, 3, 3)
    assert np.array_equal(hadamard(a, np.ones_like(a)), a)
    assert not hadamard(a, np.zeros_like(a)).any()
    expected = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        expected[idx] = a[idx] * b[idx]
    assert np.array_equal(hadamard(a, b), expected)
    assert np.array_equal(hadamard(a, b), hadamard(b, a))


def test_pixelwise_add(rng):
    a, b = rand(rng, 1, 2, 3, 3), rand(rng, 1, 2, 3, 3)
    assert np.array_equal(pixelwise_add(a, np.zeros_like(a)), a)
    assert not pixelwise_add(a, -a).any()
    expected = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        expected[idx] = a[idx] + b[idx]
    assert np.array_equal(pixelwise_add(a, b), expected)
    assert np.array_equal(pixelwise_add(a, b), pixelwise_add(b, a))


@pytest.mark.parametrize("op", [hadamard, pixelwise_add])
def test_no_broadcasting(rng, op):
    with pytest.raises(ShapeError):
        op(rand(rng, 1, 2, 3, 3), rand(rng, 1, 1, 3, 3))


def test_as_tensor_and_dtype_switch():
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((3, 3)))
    assert get_dtype() == np.float32
    with precision(np.float64):
        assert as_tensor(np.zeros((1, 1, 2, 2))).dtype == np.float64
    assert get_dtype() == np.float32
