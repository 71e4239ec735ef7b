"""Separable image resampling with MATLAB ``imresize`` conventions.

Output pixel ``i`` (0-based) maps to input coordinate
``(i + 0.5) / factor - 0.5``. When shrinking, the kernel is stretched by
``1 / factor`` and every weight row is renormalised to sum to one
(antialiasing). Samples beyond the border are taken from the nearest edge
pixel by default; ``edge="symmetric"`` mirrors them instead, which is what
MATLAB itself does.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

Kernel = Callable[[np.ndarray], np.ndarray]

CUBIC_A = -0.5


def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def triangle(x: np.ndarray) -> np.ndarray:
    return np.maximum(1 - np.abs(x), 0.0)


KERNELS: dict[str, tuple[Kernel, float]] = {
    "bicubic": (cubic, 4.0),
    "bilinear": (triangle, 2.0),
}


def output_size(size: int, factor) -> int:
    return int(math.floor(float(factor) * size + 0.5))


def _edge_index(idx: np.ndarray, n: int, edge: str) -> np.ndarray:
    if edge == "replicate":
        return np.clip(idx, 0, n - 1)
    if edge == "symmetric":
        period = 2 * n
        idx = np.mod(idx, period)
        return np.where(idx < n, idx, period - 1 - idx)
    raise ValueError(f"unknown edge rule {edge!r}")


def resize_matrix(in_size: int, out_size: int, factor, kernel: str = "bicubic",
                  antialias: bool = True, edge: str = "replicate") -> np.ndarray:
    """Dense (out_size, in_size) float64 matrix applying 1-D resampling."""
    fn, width = KERNELS[kernel]
    scale = float(factor)
    if scale < 1 and antialias:
        h = lambda t: scale * fn(scale * t)  # noqa: E731
        width = width / scale
    else:
        h = fn
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(centers - width / 2).astype(np.int64)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = h(centers[:, None] - idx)
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(mat, (rows, _edge_index(idx, in_size, edge).ravel()), weights.ravel())
    return mat


def _resize(img: np.ndarray, factor, kernel: str, antialias: bool, edge: str) -> np.ndarray:
    if not float(factor) > 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    if img.ndim < 2:
        raise ValueError(f"resize expects an array with trailing (h, w) axes, got shape {img.shape}")
    h, w = img.shape[-2:]
    oh, ow = output_size(h, factor), output_size(w, factor)
    if oh < 1 or ow < 1:
        raise ValueError(f"resize factor {factor} shrinks {(h, w)} to nothing")
    rows = resize_matrix(h, oh, factor, kernel, antialias, edge)
    cols = resize_matrix(w, ow, factor, kernel, antialias, edge)
    x = img.astype(np.float64)
    out = np.matmul(np.matmul(rows, x), cols.T)
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)


def bicubic_resize(img: np.ndarray, factor, *, antialias: bool = True, edge: str = "replicate") -> np.ndarray:
    """Resize the last two axes of ``img`` by ``factor`` with the a=-0.5 cubic kernel."""
    return _resize(img, factor, "bicubic", antialias, edge)


def bilinear_resize(img: np.ndarray, factor, *, antialias: bool = True, edge: str = "replicate") -> np.ndarray:
    """Resize the last two axes of ``img`` by ``factor`` with the tent kernel."""
    return _resize(img, factor, "bilinear", antialias, edge)
