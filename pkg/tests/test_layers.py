import numpy as np
import pytest

from dban.layers import (
    PRELU,
    RELU,
    SIGMOID,
    ConfigError,
    Conv2dParams,
    Deconv2dParams,
    activation_backward,
    activation_forward,
    conv2d_backward,
    conv2d_forward,
    deconv2d_backward,
    deconv2d_forward,
    init_params,
    make_conv,
    make_deconv,
)
from dban.tensor import ShapeError
from oracles import conv2d_naive, deconv2d_naive, numerical_grad, rel_error, relu_naive, sigmoid_naive

FD_STEP = 1e-4
SEEDS = range(20)


def identity_conv(c, dtype=np.float32):
    w = np.zeros((c, c, 1, 1), dtype=dtype)
    w[np.arange(c), np.arange(c)] = 1
    return Conv2dParams(w, np.zeros(c, dtype=dtype), 1, 0)


# -- conv forward -------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    assert np.array_equal(conv2d_forward(x, identity_conv(3)), x)


def test_conv_preserves_96():
    p = make_conv(3, 16, 3, seed=0)
    assert conv2d_forward(np.zeros((1, 3, 96, 96), np.float32), p).shape == (1, 16, 96, 96)


def test_conv_ones_center_and_corner():
    p = Conv2dParams(np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
    out = conv2d_forward(np.ones((1, 1, 3, 3)), p)
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == 4
    assert np.array_equal(out, conv2d_naive(np.ones((1, 1, 3, 3)), p.weight, p.bias, 1, 1))


@pytest.mark.parametrize("cin,cout", [(3, 4), (5, 2)])
@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (2, 2, 0), (5, 1, 2), (4, 2, 1), (3, 1, 0)])
def test_conv_matches_loop_oracle(rng, k, stride, pad, cin, cout):
    x = rng.standard_normal((2, cin, 8, 8))
    w = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    got = conv2d_forward(x, Conv2dParams(w, b, stride, pad))
    assert np.abs(got - conv2d_naive(x, w, b, stride, pad)).max() < 1e-5


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_conv_same_padding_preserves_size(k):
    p = make_conv(2, 3, k, seed=k)
    assert conv2d_forward(np.zeros((1, 2, 9, 11), np.float32), p).shape == (1, 3, 9, 11)


def test_conv_linear_without_bias(rng):
    x, y = rng.standard_normal((2, 1, 3, 6, 6))
    p = Conv2dParams(rng.standard_normal((2, 3, 3, 3)), None, 1, 1)
    lhs = conv2d_forward(1.5 * x - 0.7 * y, p)
    rhs = 1.5 * conv2d_forward(x, p) - 0.7 * conv2d_forward(y, p)
    assert np.abs(lhs - rhs).max() < 1e-5


def test_conv_shape_errors():
    p = make_conv(3, 4, 3, seed=0)
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 2, 5, 5), np.float32), p)
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 3, 6, 6), np.float32), Conv2dParams(p.weight, p.bias, 2, 0))
    with pytest.raises(ShapeError):
        conv2d_backward(np.zeros((1, 3, 5, 5), np.float32), p, np.zeros((1, 4, 4, 4), np.float32))


# -- conv backward ------------------------------------------------------------

def test_conv_backward_zero_grad(rng):
    p = make_conv(2, 3, 3, seed=1)
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    gx, gw, gb = conv2d_backward(x, p, np.zeros((1, 3, 5, 5), np.float32))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_identity(rng):
    x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    g = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    gx, _, _ = conv2d_backward(x, identity_conv(3), g)
    assert np.array_equal(gx, g)


def conv_fd_error(seed, stride=1, pad=1, k=3, size=5, cin=2, cout=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, cin, size, size))
    p = Conv2dParams(rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout), stride, pad)
    out = conv2d_forward(x, p)
    wout = rng.standard_normal(out.shape)
    gx, gw, gb = conv2d_backward(x, p, wout)
    f = lambda: float(np.sum(conv2d_forward(x, p) * wout))  # noqa: E731
    return max(rel_error(gx.ravel(), numerical_grad(f, x, FD_STEP)),
               rel_error(gw.ravel(), numerical_grad(f, p.weight, FD_STEP)),
               rel_error(gb.ravel(), numerical_grad(f, p.bias, FD_STEP)))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_backward_finite_differences(seed):
    assert conv_fd_error(seed) < 1e-6


@pytest.mark.parametrize("k,stride,pad,size", [(3, 2, 1, 7), (1, 1, 0, 4), (5, 1, 2, 5), (3, 1, 0, 6)])
def test_conv_backward_geometries(k, stride, pad, size):
    assert conv_fd_error(99, stride, pad, k, size) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_backward_narrowing_finite_differences(seed):
    # fewer output than input channels takes the shifted-product route
    assert conv_fd_error(seed, cin=4, cout=2) < 1e-6
    assert conv_fd_error(seed, pad=0, cin=3, cout=1, size=6) < 1e-6


# -- deconv -------------------------------------------------------------------

def test_deconv_identity(rng):
    w = np.zeros((3, 3, 1, 1), np.float32)
    w[np.arange(3), np.arange(3)] = 1
    p = Deconv2dParams(w, np.zeros(3, np.float32), 1, 0)
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    assert np.array_equal(deconv2d_forward(x, p), x)
    gx, _, _ = deconv2d_backward(x, p, x)
    assert np.array_equal(gx, x)


@pytest.mark.parametrize("s,k,p,size", [(2, 4, 1, 48), (3, 5, 1, 16), (4, 6, 1, 5), (2, 2, 0, 7)])
def test_deconv_output_is_stride_times_input(s, k, p, size):
    d = make_deconv(2, 2, k, s, p, seed=0)
    assert deconv2d_forward(np.zeros((1, 2, size, size), np.float32), d).shape == (1, 2, s * size, s * size)


@pytest.mark.parametrize("s,k,p", [(2, 4, 1), (3, 5, 1), (1, 3, 1)])
def test_deconv_matches_scatter_oracle(rng, s, k, p):
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(2)
    got = deconv2d_forward(x, Deconv2dParams(w, b, s, p))
    assert np.abs(got - deconv2d_naive(x, w, b, s, p)).max() < 1e-5


@pytest.mark.parametrize("s,k,p", [(2, 4, 1), (3, 5, 1)])
def test_deconv_is_adjoint_of_strided_conv(rng, s, k, p):
    x = rng.standard_normal((1, 3, 5, 5))
    y = rng.standard_normal((1, 2, 5 * s, 5 * s))
    w = rng.standard_normal((3, 2, k, k))
    up = deconv2d_forward(x, Deconv2dParams(w, None, s, p))
    # the paired convolution maps 2 -> 3 channels with the same (in, out) weight block
    down = conv2d_naive(y, w, None, s, p)
    assert abs(np.sum(up * y) - np.sum(x * down)) < 1e-5 * max(1.0, abs(np.sum(up * y)))


def test_deconv_config_error():
    with pytest.raises(ConfigError):
        make_deconv(2, 2, 3, 2, 1, seed=0)
    with pytest.raises(ConfigError):
        deconv2d_forward(np.zeros((1, 2, 3, 3)), Deconv2dParams(np.zeros((2, 2, 3, 3)), None, 2, 1))


def test_deconv_backward_zero_grad(rng):
    d = make_deconv(2, 3, 4, 2, 1, seed=0)
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    gx, gw, gb = deconv2d_backward(x, d, np.zeros((1, 3, 8, 8), np.float32))
    assert not gx.any() and not gw.any() and not gb.any()


def deconv_fd_error(seed, s=2, k=4, p=1):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 4))
    d = Deconv2dParams(rng.standard_normal((2, 2, k, k)), rng.standard_normal(2), s, p)
    wout = rng.standard_normal(deconv2d_forward(x, d).shape)
    gx, gw, gb = deconv2d_backward(x, d, wout)
    f = lambda: float(np.sum(deconv2d_forward(x, d) * wout))  # noqa: E731
    return max(rel_error(gx.ravel(), numerical_grad(f, x, FD_STEP)),
               rel_error(gw.ravel(), numerical_grad(f, d.weight, FD_STEP)),
               rel_error(gb.ravel(), numerical_grad(f, d.bias, FD_STEP)))


@pytest.mark.parametrize("seed", SEEDS)
def test_deconv_backward_finite_differences(seed):
    assert deconv_fd_error(seed) < 1e-6


def test_deconv_backward_scale3():
    assert deconv_fd_error(7, 3, 5, 1) < 1e-6


# -- activations --------------------------------------------------------------

def test_activation_values():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    assert activation_forward(x, RELU).ravel().tolist() == [0.0, 0.0, 2.0]
    assert activation_forward(x, SIGMOID)[0, 0, 0, 1] == 0.5
    assert activation_forward(np.full((1, 1, 1, 1), -2.0), PRELU, np.array([0.25]))[0, 0, 0, 0] == -0.5


def test_activations_match_scalar_definitions(rng):
    x = rng.standard_normal((2, 3, 4, 4)) * 4
    assert np.array_equal(activation_forward(x, RELU), relu_naive(x))
    assert np.abs(activation_forward(x, SIGMOID) - sigmoid_naive(x)).max() < 1e-12
    # sigmoid stays finite for extreme inputs
    assert np.isfinite(activation_forward(np.array([-1e4, 1e4]).reshape(1, 1, 1, 2), SIGMOID)).all()


def test_activation_backward_values():
    g = np.ones((1, 1, 1, 3))
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    gx, _ = activation_backward(x, RELU, g)
    assert gx.ravel().tolist() == [0.0, 0.0, 1.0]
    gx, _ = activation_backward(np.zeros((1, 1, 1, 1)), SIGMOID, np.full((1, 1, 1, 1), 2.0))
    assert gx[0, 0, 0, 0] == 0.5


def test_prelu_slope_length_checked():
    with pytest.raises(ShapeError):
        activation_forward(np.zeros((1, 2, 2, 2)), PRELU, np.array([0.25]))
    with pytest.raises(ShapeError):
        activation_forward(np.zeros((1, 2, 2, 2)), PRELU)


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def activation_fd_error(seed, kind):
    rng = np.random.default_rng(seed)
    x = away_from_zero(rng, (2, 3, 3, 3))
    slope = rng.uniform(0.05, 0.5, 3) if kind == PRELU else None
    wout = rng.standard_normal(x.shape)
    gx, gs = activation_backward(x, kind, wout, slope)
    f = lambda: float(np.sum(activation_forward(x, kind, slope) * wout))  # noqa: E731
    err = rel_error(gx.ravel(), numerical_grad(f, x, FD_STEP))
    if kind == PRELU:
        err = max(err, rel_error(gs, numerical_grad(f, slope, FD_STEP)))
    return err


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", [RELU, PRELU, SIGMOID])
def test_activation_finite_differences(seed, kind):
    assert activation_fd_error(seed, kind) < 1e-6


# -- init ---------------------------------------------------------------------

def test_init_deterministic_and_he_scaled():
    a = init_params((16, 16, 3, 3), seed=5)
    assert np.array_equal(a, init_params((16, 16, 3, 3), seed=5))
    assert not np.array_equal(a, init_params((16, 16, 3, 3), seed=6))
    big = init_params((100_000, 1), seed=0, fan_in=144, dtype=np.float64)
    assert abs(big.std() / np.sqrt(2 / 144) - 1) < 0.05
    assert abs(big.mean()) < 0.01 * np.sqrt(2 / 144) * 10


def test_bias_starts_at_zero():
    assert not make_conv(3, 8, 3, seed=0).bias.any()
    assert not make_deconv(4, 4, 4, 2, 1, seed=0).bias.any()


def test_sigmoid_keeps_lower_tail():
    # a tanh-based formula cancels to exactly 0 here in float32
    x = np.array([-20.0, -60.0, 20.0], np.float32).reshape(1, 1, 1, 3)
    s = activation_forward(x, SIGMOID)
    assert s.dtype == np.float32
    assert s[0, 0, 0, 0] == pytest.approx(np.exp(-20.0), rel=1e-6)
    assert s[0, 0, 0, 1] == pytest.approx(np.exp(-60.0), rel=1e-6)
    assert s[0, 0, 0, 2] == 1.0
