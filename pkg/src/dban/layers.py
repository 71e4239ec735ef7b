"""Convolution, transposed convolution and activations with analytic gradients.

Convolutions are lowered to matrix products with an explicit patch gather
(im2col); the scatter back (col2im) is its exact adjoint and serves both the
convolution input gradient and the transposed-convolution forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from dban.tensor import ShapeError, get_dtype

RELU = "relu"
PRELU = "prelu"
SIGMOID = "sigmoid"

PRELU_INIT = 0.25


class ConfigError(ValueError):
    """Raised for layer hyperparameters that cannot produce a valid output."""


@dataclass
class Conv2dParams:
    weight: np.ndarray  # (out_channels, in_channels, k, k)
    bias: Optional[np.ndarray]  # (out_channels,) or None
    stride: int = 1
    pad: int = 0

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]


@dataclass
class Deconv2dParams:
    weight: np.ndarray  # (in_channels, out_channels, k, k)
    bias: Optional[np.ndarray]  # (out_channels,) or None
    stride: int = 2
    pad: int = 1

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]


def init_params(shape, seed, fan_in: Optional[int] = None, dtype=None) -> np.ndarray:
    """He-normal weights: zero mean, std sqrt(2 / fan_in).

    ``fan_in`` defaults to ``prod(shape[1:])``, i.e. in_channels * k * k for a
    convolution weight laid out as (out, in, k, k).
    """
    shape = tuple(int(s) for s in shape)
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    rng = np.random.default_rng(seed)
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype or get_dtype())


def make_conv(in_channels: int, out_channels: int, k: int, seed, *, stride: int = 1,
              pad: Optional[int] = None, bias: bool = True) -> Conv2dParams:
    if pad is None:
        pad = (k - 1) // 2
    weight = init_params((out_channels, in_channels, k, k), seed)
    b = np.zeros(out_channels, dtype=weight.dtype) if bias else None
    return Conv2dParams(weight, b, stride, pad)


def make_deconv(in_channels: int, out_channels: int, k: int, stride: int, pad: int, seed) -> Deconv2dParams:
    if k - 2 * pad != stride:
        raise ConfigError(f"deconv requires k - 2*pad == stride, got k={k}, pad={pad}, stride={stride}")
    weight = init_params((in_channels, out_channels, k, k), seed, fan_in=in_channels * k * k)
    return Deconv2dParams(weight, np.zeros(out_channels, dtype=weight.dtype), stride, pad)


# -- patch gather / scatter ---------------------------------------------------
# Patch matrices use a (c, k, k, n, oh, ow) layout so that batch and space fold
# into one column axis and every layer is a single matrix product.

def _im2col(xp: np.ndarray, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    """Gather patches of an already padded (n, c, H, W) input as (c*k*k, n*oh*ow)."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, oh, ow), dtype=xp.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, u, v] = xt[:, :, u:u + s * oh:s, v:v + s * ow:s]
    return cols.reshape(c * k * k, n * oh * ow)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, s: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches into a padded (n, c, H, W) canvas."""
    n, c, hp, wp = shape
    cols = cols.reshape(c, k, k, n, oh, ow)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + s * oh:s, v:v + s * ow:s] += cols[:, u, v]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def _to_nchw(y: np.ndarray, n: int, c: int, h: int, w: int) -> np.ndarray:
    """(c, n*h*w) matrix to a contiguous (n, c, h, w) tensor."""
    return np.ascontiguousarray(y.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def _to_cmat(x: np.ndarray) -> np.ndarray:
    """(n, c, h, w) tensor to a (c, n*h*w) matrix."""
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv: size {size} with k={k}, stride={stride}, pad={pad} "
                         "does not give an integral output size")
    return span // stride + 1


def _check_conv_input(x: np.ndarray, in_channels: int, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 input, got shape {x.shape}")
    if x.shape[1] != in_channels:
        raise ShapeError(f"{what}: input has {x.shape[1]} channels, layer expects {in_channels}")


def _patches(x: np.ndarray, k: int, s: int, pad: int, oh: int, ow: int) -> np.ndarray:
    if k == 1 and s == 1 and pad == 0:
        return _to_cmat(x)
    return _im2col(_pad(x, pad), k, s, oh, ow)


# -- convolution --------------------------------------------------------------
# Stride-1 layers that narrow the channel count (out < in) expand the output
# side instead: the k*k per-tap products are computed once over the padded
# input and summed with shifts, so the k*k copy involves out channels, not in.

def _narrow(p: Conv2dParams) -> bool:
    return p.stride == 1 and p.k > 1 and p.out_channels < p.in_channels


def _tap_weights(p: Conv2dParams) -> np.ndarray:
    """(k*k*out, in) matrix; row block (u, v) holds weight[:, :, u, v]."""
    return p.weight.transpose(2, 3, 0, 1).reshape(-1, p.in_channels)


def _spread(g: np.ndarray, k: int, hp: int, wp: int) -> np.ndarray:
    """Place a (o, n, oh, ow) array at every tap offset of a (k, k, o, n, hp, wp) canvas."""
    o, n, oh, ow = g.shape
    out = np.zeros((k, k, o, n, hp, wp), dtype=g.dtype)
    for u in range(k):
        for v in range(k):
            out[u, v, :, :, u:u + oh, v:v + ow] = g
    return out.reshape(k * k * o, n * hp * wp)


def _conv_narrow_forward(x: np.ndarray, p: Conv2dParams, oh: int, ow: int) -> np.ndarray:
    n = x.shape[0]
    k, o = p.k, p.out_channels
    xp = _pad(x, p.pad)
    hp, wp = xp.shape[2:]
    z = (_tap_weights(p) @ _to_cmat(xp)).reshape(k, k, o, n, hp, wp)
    out = np.zeros((o, n, oh, ow), dtype=z.dtype)
    for u in range(k):
        for v in range(k):
            out += z[u, v, :, :, u:u + oh, v:v + ow]
    return out.reshape(o, n * oh * ow)


def _conv_narrow_backward(x: np.ndarray, p: Conv2dParams, g: np.ndarray, oh: int, ow: int):
    n, c, h, w = x.shape
    k, o = p.k, p.out_channels
    xp = _pad(x, p.pad)
    hp, wp = xp.shape[2:]
    spread = _spread(g.reshape(o, n, oh, ow), k, hp, wp)
    grad_w = (spread @ _to_cmat(xp).T).reshape(k, k, o, c).transpose(2, 3, 0, 1)
    grad_xp = _tap_weights(p).T @ spread
    grad_x = _unpad(grad_xp.reshape(c, n, hp, wp).transpose(1, 0, 2, 3), p.pad)
    return np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_w)


def conv2d_forward(x: np.ndarray, p: Conv2dParams) -> np.ndarray:
    _check_conv_input(x, p.in_channels, "conv2d_forward")
    n, _, h, w = x.shape
    k, s = p.k, p.stride
    oh = conv_output_size(h, k, s, p.pad)
    ow = conv_output_size(w, k, s, p.pad)
    if _narrow(p):
        out = _conv_narrow_forward(x, p, oh, ow)
    else:
        out = p.weight.reshape(p.out_channels, -1) @ _patches(x, k, s, p.pad, oh, ow)
    if p.bias is not None:
        out += p.bias[:, None]
    return _to_nchw(out, n, p.out_channels, oh, ow)


def conv2d_backward(x: np.ndarray, p: Conv2dParams, grad_out: np.ndarray):
    """Return ``(grad_x, grad_weight, grad_bias)``; ``grad_bias`` is None without bias."""
    _check_conv_input(x, p.in_channels, "conv2d_backward")
    n, c, h, w = x.shape
    k, s = p.k, p.stride
    oh = conv_output_size(h, k, s, p.pad)
    ow = conv_output_size(w, k, s, p.pad)
    if grad_out.shape != (n, p.out_channels, oh, ow):
        raise ShapeError(f"conv2d_backward: grad_out shape {grad_out.shape}, "
                         f"expected {(n, p.out_channels, oh, ow)}")
    g = _to_cmat(grad_out)
    grad_b = g.sum(axis=1) if p.bias is not None else None
    if _narrow(p):
        grad_x, grad_w = _conv_narrow_backward(x, p, g, oh, ow)
        return grad_x, grad_w, grad_b
    cols = _patches(x, k, s, p.pad, oh, ow)
    grad_w = (g @ cols.T).reshape(p.weight.shape)
    gcols = p.weight.reshape(p.out_channels, -1).T @ g
    if k == 1 and s == 1 and p.pad == 0:
        return _to_nchw(gcols, n, c, h, w), grad_w, grad_b
    full = _col2im(gcols, (n, c, h + 2 * p.pad, w + 2 * p.pad), k, s, oh, ow)
    return np.ascontiguousarray(_unpad(full, p.pad)), grad_w, grad_b


# -- transposed convolution ---------------------------------------------------

def deconv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def _check_deconv(p: Deconv2dParams) -> None:
    if p.k - 2 * p.pad != p.stride:
        raise ConfigError(f"deconv requires k - 2*pad == stride, got k={p.k}, pad={p.pad}, stride={p.stride}")


def deconv2d_forward(x: np.ndarray, p: Deconv2dParams) -> np.ndarray:
    _check_deconv(p)
    _check_conv_input(x, p.in_channels, "deconv2d_forward")
    n, c, h, w = x.shape
    k, s = p.k, p.stride
    cols = p.weight.reshape(c, -1).T @ _to_cmat(x)
    full = _col2im(cols, (n, p.out_channels, (h - 1) * s + k, (w - 1) * s + k), k, s, h, w)
    out = np.ascontiguousarray(_unpad(full, p.pad))
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return out


def deconv2d_backward(x: np.ndarray, p: Deconv2dParams, grad_out: np.ndarray):
    """Return ``(grad_x, grad_weight, grad_bias)``."""
    _check_deconv(p)
    _check_conv_input(x, p.in_channels, "deconv2d_backward")
    n, c, h, w = x.shape
    k, s = p.k, p.stride
    expected = (n, p.out_channels, deconv_output_size(h, k, s, p.pad), deconv_output_size(w, k, s, p.pad))
    if grad_out.shape != expected:
        raise ShapeError(f"deconv2d_backward: grad_out shape {grad_out.shape}, expected {expected}")
    cols = _im2col(_pad(grad_out, p.pad), k, s, h, w)
    xm = _to_cmat(x)
    grad_x = _to_nchw(p.weight.reshape(c, -1) @ cols, n, c, h, w)
    grad_w = (xm @ cols.T).reshape(p.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if p.bias is not None else None
    return grad_x, grad_w, grad_b


# -- activations --------------------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only: no overflow, and the lower tail keeps its precision
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _check_slope(x: np.ndarray, slope) -> np.ndarray:
    if slope is None:
        raise ShapeError("prelu requires a slope vector")
    slope = np.asarray(slope)
    if slope.ndim != 1 or slope.shape[0] != x.shape[1]:
        raise ShapeError(f"prelu: slope length {slope.shape} does not match {x.shape[1]} channels")
    return slope


def activation_forward(x: np.ndarray, kind: str, slope: Optional[np.ndarray] = None) -> np.ndarray:
    if kind == RELU:
        return np.maximum(x, 0)
    if kind == PRELU:
        slope = _check_slope(x, slope)
        return np.where(x > 0, x, slope[None, :, None, None] * x)
    if kind == SIGMOID:
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x: np.ndarray, kind: str, grad_out: np.ndarray,
                        slope: Optional[np.ndarray] = None):
    """Return ``(grad_x, grad_slope)``; ``grad_slope`` is None except for prelu.

    The relu derivative at exactly 0 is taken as 0.
    """
    if grad_out.shape != x.shape:
        raise ShapeError(f"activation_backward: grad_out {grad_out.shape} vs input {x.shape}")
    if kind == RELU:
        return np.where(x > 0, grad_out, 0).astype(grad_out.dtype), None
    if kind == PRELU:
        slope = _check_slope(x, slope)
        pos = x > 0
        grad_x = np.where(pos, grad_out, slope[None, :, None, None] * grad_out)
        grad_slope = np.where(pos, 0, x * grad_out).sum(axis=(0, 2, 3))
        return grad_x, grad_slope.astype(slope.dtype)
    if kind == SIGMOID:
        sg = sigmoid(x)
        return grad_out * sg * (1 - sg), None
    raise ValueError(f"unknown activation {kind!r}")
