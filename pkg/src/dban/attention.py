"""Blended attention block.

A full-resolution descriptor ``tau = sigmoid(expand(relu(reduce(x))))`` with
the same shape as ``x`` weights every channel and every spatial position at
once; the block output is ``tau * x``. Both convolutions are 1x1; the reduce
layer narrows C to C // ratio channels (at least one) and carries no bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dban.layers import (
    RELU,
    Conv2dParams,
    activation_backward,
    activation_forward,
    conv2d_backward,
    conv2d_forward,
    make_conv,
    sigmoid,
)
from dban.tensor import ShapeError, hadamard

DEFAULT_RATIO = 16


@dataclass
class AttentionParams:
    reduce: Conv2dParams
    expand: Conv2dParams
    ratio: int = DEFAULT_RATIO

    @property
    def channels(self) -> int:
        return self.reduce.in_channels


def reduced_channels(channels: int, ratio: int) -> int:
    return max(channels // ratio, 1)


def make_attention(channels: int, seed, ratio: int = DEFAULT_RATIO) -> AttentionParams:
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    s_reduce, s_expand = ss.spawn(2)
    mid = reduced_channels(channels, ratio)
    reduce = make_conv(channels, mid, 1, s_reduce, pad=0, bias=False)
    expand = make_conv(mid, channels, 1, s_expand, pad=0, bias=True)
    return AttentionParams(reduce, expand, ratio)


def _check(x: np.ndarray, p: AttentionParams) -> None:
    if p.expand.out_channels != p.channels or p.reduce.out_channels != p.expand.in_channels:
        raise ShapeError("attention: reduce/expand channel counts are inconsistent")
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"attention: input shape {x.shape} does not have {p.channels} channels")


def gate(z: np.ndarray) -> np.ndarray:
    """Sigmoid held inside the open interval (0, 1) at the working precision.

    Past |z| of about 17 (float32) or 37 (float64) the exact sigmoid rounds to
    1.0, which would let the gate open fully; one ulp below 1 keeps the
    block strictly attenuating at a cost no larger than the product's own rounding.
    """
    info = np.finfo(z.dtype)
    return np.clip(sigmoid(z), info.tiny, 1.0 - info.epsneg)


def attention_forward(x: np.ndarray, p: AttentionParams):
    """Return ``(y, tau)``."""
    _check(x, p)
    tau = gate(conv2d_forward(activation_forward(conv2d_forward(x, p.reduce), RELU), p.expand))
    return hadamard(tau, x), tau


def attention_backward(x: np.ndarray, p: AttentionParams, grad_y: np.ndarray):
    """Return ``(grad_x, grads)`` with ``grads`` keyed reduce.weight, expand.weight, expand.bias."""
    _check(x, p)
    if grad_y.shape != x.shape:
        raise ShapeError(f"attention_backward: grad_y {grad_y.shape} vs input {x.shape}")
    z1 = conv2d_forward(x, p.reduce)
    a1 = activation_forward(z1, RELU)
    z2 = conv2d_forward(a1, p.expand)
    tau = gate(z2)

    grad_x = grad_y * tau  # identity path of the product
    grad_z2 = grad_y * x * tau * (1 - tau)
    grad_a1, gw_expand, gb_expand = conv2d_backward(a1, p.expand, grad_z2)
    grad_z1, _ = activation_backward(z1, RELU, grad_a1)
    grad_x_desc, gw_reduce, _ = conv2d_backward(x, p.reduce, grad_z1)
    grad_x += grad_x_desc
    grads = {"reduce.weight": gw_reduce, "expand.weight": gw_expand, "expand.bias": gb_expand}
    return grad_x, grads
