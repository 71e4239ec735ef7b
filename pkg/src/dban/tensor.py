"""Rank-4 (n, c, h, w) tensors and the structural primitives built on them.

A tensor is a plain C-contiguous numpy array of rank 4. No broadcasting is
performed anywhere: every shape mismatch raises ``ShapeError``.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

_DTYPE = np.dtype(np.float32)


class ShapeError(ValueError):
    """Raised when tensor shapes or channel counts disagree."""


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    """Set the element type used for new parameters and loaded images."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default element type (float64 for gradient checks)."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def as_tensor(data, dtype=None) -> np.ndarray:
    """Validate ``data`` as a rank-4 tensor and return a contiguous array."""
    arr = np.ascontiguousarray(data, dtype=dtype or _DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all tensor extents must be >= 1, got {arr.shape}")
    return arr


def zeros(n: int, c: int, h: int, w: int, dtype=None) -> np.ndarray:
    return np.zeros((n, c, h, w), dtype=dtype or _DTYPE)


def is_finite(x: np.ndarray) -> bool:
    return bool(np.isfinite(x).all())


def _require_rank4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 tensor, got shape {x.shape}")


def _require_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    _require_rank4(a, what)
    _require_rank4(b, what)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def concat_channels(inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate tensors along the channel axis, in list order."""
    if len(inputs) == 0:
        raise ShapeError("concat_channels: empty input list")
    first = inputs[0]
    _require_rank4(first, "concat_channels[0]")
    n, _, h, w = first.shape
    for i, t in enumerate(inputs):
        _require_rank4(t, f"concat_channels[{i}]")
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: input {i} has (n, h, w)={(t.shape[0], t.shape[2], t.shape[3])}, "
                f"expected {(n, h, w)}"
            )
    return np.concatenate(inputs, axis=1)


def slice_channels(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Copy of channels ``start:stop``."""
    _require_rank4(x, "slice_channels")
    if not (0 <= start < stop <= x.shape[1]):
        raise IndexError(f"slice_channels: invalid range [{start}, {stop}) for c={x.shape[1]}")
    return x[:, start:stop].copy()


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of ``concat_channels`` for blocks of the given widths."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not sum to c={x.shape[1]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_channels(x, start, start + s))
        start += s
    return out


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require_same_shape(a, b, "hadamard")
    return a * b


def pixelwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require_same_shape(a, b, "pixelwise_add")
    return a + b
