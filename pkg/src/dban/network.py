"""Dense blended attention network: channel plan, forward and reverse passes.

Topology (defaults)::

    x --conv3x3+relu--> F (128)
    unit j input  = concat(F, U_1, ..., U_{j-1})       (128*j channels)
    unit j output = attention(concat(h_1, ..., h_8))     (8 * 16 = 128)
        h_i = relu(conv3x3(concat(unit input, h_1, ..., h_{i-1})))  (16 each)
    concat(F, U_1, ..., U_8) (1152) --1x1 conv+relu--> 256
    --[deconv + prelu] x stages--> 256 at scale x size
    --conv3x3--> image channels (no activation, no clamp)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from dban.attention import AttentionParams, attention_backward, attention_forward, make_attention, \
    reduced_channels
from dban.layers import (
    PRELU,
    PRELU_INIT,
    RELU,
    ConfigError,
    Conv2dParams,
    Deconv2dParams,
    activation_backward,
    activation_forward,
    conv2d_backward,
    conv2d_forward,
    deconv2d_backward,
    deconv2d_forward,
    make_conv,
    make_deconv,
)
from dban.tensor import ShapeError, concat_channels, get_dtype, split_channels

SUPPORTED_SCALES = (2, 3, 4)

# (stride, kernel, pad) per upsampling stage; each satisfies k - 2p = s
DECONV_PLAN = {
    2: [(2, 4, 1)],
    3: [(3, 5, 1)],
    4: [(2, 4, 1), (2, 4, 1)],
}


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 2
    in_channels: int = 3
    num_units: int = 8
    layers_per_unit: int = 8
    growth: int = 16
    feat_channels: int = 128
    bottleneck_channels: int = 256
    attention_ratio: int = 16

    def __post_init__(self):
        if self.scale not in SUPPORTED_SCALES:
            raise ConfigError(f"scale must be one of {SUPPORTED_SCALES}, got {self.scale}")
        for name in ("in_channels", "num_units", "layers_per_unit", "growth", "feat_channels",
                     "bottleneck_channels", "attention_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def toy(cls, scale: int = 2, in_channels: int = 3) -> "ModelConfig":
        """Tiny topology used by tests and the ``--toy`` CLI preset."""
        return cls(scale=scale, in_channels=in_channels, num_units=2, layers_per_unit=2, growth=8,
                   feat_channels=16, bottleneck_channels=32)

    @property
    def unit_out_channels(self) -> int:
        return self.growth * self.layers_per_unit

    def unit_in_channels(self, j: int) -> int:
        """Input width of unit ``j`` (0-based)."""
        return self.feat_channels + j * self.unit_out_channels

    @property
    def bottleneck_in_channels(self) -> int:
        return self.unit_in_channels(self.num_units)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BasicUnitParams:
    convs: list[Conv2dParams]
    attention: AttentionParams


@dataclass
class ModelParams:
    feature_conv: Conv2dParams
    units: list[BasicUnitParams]
    bottleneck: Conv2dParams
    deconvs: list[Deconv2dParams]
    prelu_slopes: list[np.ndarray]
    recon_conv: Conv2dParams

    def tensors(self) -> dict[str, np.ndarray]:
        """Every learnable array by dotted name, in a fixed order. Arrays are shared, not copied."""
        out: dict[str, np.ndarray] = {}

        def conv(prefix: str, p):
            out[f"{prefix}.weight"] = p.weight
            if p.bias is not None:
                out[f"{prefix}.bias"] = p.bias

        conv("feature", self.feature_conv)
        for j, unit in enumerate(self.units):
            for i, c in enumerate(unit.convs):
                conv(f"units.{j}.convs.{i}", c)
            conv(f"units.{j}.attention.reduce", unit.attention.reduce)
            conv(f"units.{j}.attention.expand", unit.attention.expand)
        conv("bottleneck", self.bottleneck)
        for i, (d, slope) in enumerate(zip(self.deconvs, self.prelu_slopes)):
            conv(f"deconvs.{i}", d)
            out[f"prelus.{i}.slope"] = slope
        conv("recon", self.recon_conv)
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.tensors().values())


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Initialise every layer from ``seed``; the result is fully determined by (cfg, seed)."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError("build_model expects a ModelConfig")
    plan = DECONV_PLAN[cfg.scale]
    seeds = iter(np.random.SeedSequence(seed).spawn(
        2 + cfg.num_units * (cfg.layers_per_unit + 1) + len(plan) + 1))

    feature = make_conv(cfg.in_channels, cfg.feat_channels, 3, next(seeds))
    units = []
    for j in range(cfg.num_units):
        unit_in = cfg.unit_in_channels(j)
        convs = [make_conv(unit_in + cfg.growth * i, cfg.growth, 3, next(seeds))
                 for i in range(cfg.layers_per_unit)]
        att = make_attention(cfg.unit_out_channels, next(seeds), cfg.attention_ratio)
        units.append(BasicUnitParams(convs, att))
    bottleneck = make_conv(cfg.bottleneck_in_channels, cfg.bottleneck_channels, 1, next(seeds), pad=0)
    deconvs, slopes = [], []
    for s, k, p in plan:
        deconvs.append(make_deconv(cfg.bottleneck_channels, cfg.bottleneck_channels, k, s, p, next(seeds)))
        slopes.append(np.full(cfg.bottleneck_channels, PRELU_INIT, dtype=get_dtype()))
    recon = make_conv(cfg.bottleneck_channels, cfg.in_channels, 3, next(seeds))

    model = ModelParams(feature, units, bottleneck, deconvs, slopes, recon)
    check_channel_plan(model, cfg)
    return model


def check_channel_plan(m: ModelParams, cfg: ModelConfig) -> None:
    """Verify that every adjacent pair of layers agrees on channel counts."""

    def expect(what: str, got: int, want: int):
        if got != want:
            raise ShapeError(f"{what}: has {got} channels, expected {want}")

    expect("feature.in", m.feature_conv.in_channels, cfg.in_channels)
    expect("feature.out", m.feature_conv.out_channels, cfg.feat_channels)
    expect("units", len(m.units), cfg.num_units)
    for j, unit in enumerate(m.units):
        expect(f"units.{j}.convs", len(unit.convs), cfg.layers_per_unit)
        for i, c in enumerate(unit.convs):
            expect(f"units.{j}.convs.{i}.in", c.in_channels, cfg.unit_in_channels(j) + cfg.growth * i)
            expect(f"units.{j}.convs.{i}.out", c.out_channels, cfg.growth)
        expect(f"units.{j}.attention", unit.attention.channels, cfg.unit_out_channels)
        expect(f"units.{j}.attention.reduce.out", unit.attention.reduce.out_channels,
               reduced_channels(cfg.unit_out_channels, cfg.attention_ratio))
    expect("bottleneck.in", m.bottleneck.in_channels, cfg.bottleneck_in_channels)
    expect("bottleneck.out", m.bottleneck.out_channels, cfg.bottleneck_channels)
    plan = DECONV_PLAN[cfg.scale]
    expect("deconvs", len(m.deconvs), len(plan))
    for i, (d, (s, k, p)) in enumerate(zip(m.deconvs, plan)):
        expect(f"deconvs.{i}.in", d.in_channels, cfg.bottleneck_channels)
        expect(f"deconvs.{i}.out", d.out_channels, cfg.bottleneck_channels)
        if (d.stride, d.k, d.pad) != (s, k, p):
            raise ShapeError(f"deconvs.{i}: (stride, k, pad)={(d.stride, d.k, d.pad)}, expected {(s, k, p)}")
        expect(f"prelus.{i}", m.prelu_slopes[i].shape[0], cfg.bottleneck_channels)
    expect("recon.in", m.recon_conv.in_channels, cfg.bottleneck_channels)
    expect("recon.out", m.recon_conv.out_channels, cfg.in_channels)


def count_params(cfg: ModelConfig) -> int:
    """Learnable scalar count derived from the channel plan alone (weights + biases + PReLU slopes)."""

    def conv(cin: int, cout: int, k: int, bias: bool = True) -> int:
        return cin * cout * k * k + (cout if bias else 0)

    total = conv(cfg.in_channels, cfg.feat_channels, 3)
    mid = reduced_channels(cfg.unit_out_channels, cfg.attention_ratio)
    for j in range(cfg.num_units):
        for i in range(cfg.layers_per_unit):
            total += conv(cfg.unit_in_channels(j) + cfg.growth * i, cfg.growth, 3)
        total += conv(cfg.unit_out_channels, mid, 1, bias=False) + conv(mid, cfg.unit_out_channels, 1)
    total += conv(cfg.bottleneck_in_channels, cfg.bottleneck_channels, 1)
    for _, k, _ in DECONV_PLAN[cfg.scale]:
        total += conv(cfg.bottleneck_channels, cfg.bottleneck_channels, k) + cfg.bottleneck_channels
    total += conv(cfg.bottleneck_channels, cfg.in_channels, 3)
    return total


# -- basic unit ---------------------------------------------------------------

def _unit_layers(x: np.ndarray, u: BasicUnitParams):
    if x.ndim != 4 or x.shape[1] != u.convs[0].in_channels:
        raise ShapeError(f"unit: input shape {x.shape} does not match {u.convs[0].in_channels} channels")
    hs, zs = [], []
    for conv in u.convs:
        z = conv2d_forward(concat_channels([x] + hs), conv)
        zs.append(z)
        hs.append(activation_forward(z, RELU))
    return hs, zs


def unit_forward(x: np.ndarray, u: BasicUnitParams) -> np.ndarray:
    hs, _ = _unit_layers(x, u)
    y, _ = attention_forward(concat_channels(hs), u.attention)
    return y


def _unit_backward(x: np.ndarray, u: BasicUnitParams, hs, zs, grad_y: np.ndarray):
    grads: dict[str, np.ndarray] = {}
    growth = u.convs[0].out_channels
    grad_cat, att_grads = attention_backward(concat_channels(hs), u.attention, grad_y)
    for name, g in att_grads.items():
        grads[f"attention.{name}"] = g
    grad_h = split_channels(grad_cat, [growth] * len(hs))
    grad_x = np.zeros_like(x)
    for i in reversed(range(len(u.convs))):
        grad_z, _ = activation_backward(zs[i], RELU, grad_h[i])
        grad_in, gw, gb = conv2d_backward(concat_channels([x] + hs[:i]), u.convs[i], grad_z)
        grads[f"convs.{i}.weight"] = gw
        grads[f"convs.{i}.bias"] = gb
        parts = split_channels(grad_in, [x.shape[1]] + [growth] * i)
        grad_x += parts[0]
        for t in range(i):
            grad_h[t] = grad_h[t] + parts[t + 1]
    return grad_x, grads


# -- full model ---------------------------------------------------------------

@dataclass
class ForwardCache:
    """Intermediate activations retained for the reverse pass."""
    x: np.ndarray
    z_feat: Optional[np.ndarray] = None
    feats: list = field(default_factory=list)
    unit_acts: list = field(default_factory=list)
    z_bottleneck: Optional[np.ndarray] = None
    deconv_in: list = field(default_factory=list)
    z_deconv: list = field(default_factory=list)
    recon_in: Optional[np.ndarray] = None


def _check_input(x: np.ndarray, cfg: ModelConfig) -> None:
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"model: input shape {x.shape} does not have {cfg.in_channels} channels")


def model_forward_cached(x: np.ndarray, m: ModelParams, cfg: ModelConfig):
    """Forward pass returning ``(output, cache)``."""
    _check_input(x, cfg)
    cache = ForwardCache(x=x)
    cache.z_feat = conv2d_forward(x, m.feature_conv)
    cache.feats.append(activation_forward(cache.z_feat, RELU))
    for u in m.units:
        unit_in = concat_channels(cache.feats)
        hs, zs = _unit_layers(unit_in, u)
        cache.unit_acts.append((hs, zs))
        y, _ = attention_forward(concat_channels(hs), u.attention)
        cache.feats.append(y)
    cache.z_bottleneck = conv2d_forward(concat_channels(cache.feats), m.bottleneck)
    a = activation_forward(cache.z_bottleneck, RELU)
    for d, slope in zip(m.deconvs, m.prelu_slopes):
        cache.deconv_in.append(a)
        z = deconv2d_forward(a, d)
        cache.z_deconv.append(z)
        a = activation_forward(z, PRELU, slope)
    cache.recon_in = a
    return conv2d_forward(a, m.recon_conv), cache


def model_forward(x: np.ndarray, m: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Super-resolve a batch; output is (n, in_channels, scale*h, scale*w), unclamped."""
    return model_forward_cached(x, m, cfg)[0]


def model_backward(x: np.ndarray, m: ModelParams, cfg: ModelConfig, grad_out: np.ndarray,
                   cache: Optional[ForwardCache] = None, return_input_grad: bool = False):
    """Reverse-mode gradients keyed like ``ModelParams.tensors()``.

    Pass the ``cache`` from ``model_forward_cached`` to skip recomputing the forward pass.
    """
    if cache is None:
        _, cache = model_forward_cached(x, m, cfg)
    n, _, h, w = x.shape
    expected = (n, cfg.in_channels, cfg.scale * h, cfg.scale * w)
    if grad_out.shape != expected:
        raise ShapeError(f"model_backward: grad_out shape {grad_out.shape}, expected {expected}")
    grads: dict[str, np.ndarray] = {}

    def put(prefix: str, gw, gb):
        grads[f"{prefix}.weight"] = gw
        if gb is not None:
            grads[f"{prefix}.bias"] = gb

    g, gw, gb = conv2d_backward(cache.recon_in, m.recon_conv, grad_out)
    put("recon", gw, gb)
    for i in reversed(range(len(m.deconvs))):
        g, gs = activation_backward(cache.z_deconv[i], PRELU, g, m.prelu_slopes[i])
        grads[f"prelus.{i}.slope"] = gs
        g, gw, gb = deconv2d_backward(cache.deconv_in[i], m.deconvs[i], g)
        put(f"deconvs.{i}", gw, gb)
    g, _ = activation_backward(cache.z_bottleneck, RELU, g)
    g, gw, gb = conv2d_backward(concat_channels(cache.feats), m.bottleneck, g)
    put("bottleneck", gw, gb)

    widths = [f.shape[1] for f in cache.feats]
    # dense fan-out: each feature block collects gradient from every consumer
    grad_feats = split_channels(g, widths)
    for j in reversed(range(len(m.units))):
        hs, zs = cache.unit_acts[j]
        unit_in = concat_channels(cache.feats[:j + 1])
        g_in, ugrads = _unit_backward(unit_in, m.units[j], hs, zs, grad_feats[j + 1])
        for name, val in ugrads.items():
            grads[f"units.{j}.{name}"] = val
        for t, part in enumerate(split_channels(g_in, widths[:j + 1])):
            grad_feats[t] = grad_feats[t] + part
    g, _ = activation_backward(cache.z_feat, RELU, grad_feats[0])
    g_x, gw, gb = conv2d_backward(x, m.feature_conv, g)
    put("feature", gw, gb)

    names = m.tensors().keys()
    grads = {k: grads[k] for k in names}
    if return_input_grad:
        return grads, g_x
    return grads
