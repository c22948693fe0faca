import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepf0 import numkernels as nk
from deepf0.errors import NumericError, ShapeError

from conftest import numeric_grad, rel_error


def conv(v, g, b, d=1):
    return nk.ConvParams(np.asarray(v, float), np.asarray(g, float), np.asarray(b, float), d)


def random_conv(rng, out_ch=2, in_ch=2, k=3, d=1):
    return nk.ConvParams(
        rng.uniform(-1, 1, (out_ch, in_ch, k)), rng.uniform(0.5, 1.5, out_ch), rng.uniform(-1, 1, out_ch), d
    )


# --- weight norm -----------------------------------------------------------

def test_weight_norm_345():
    w = nk.weight_norm_effective(np.array([[3.0, 4.0]]), np.array([1.0]))
    np.testing.assert_allclose(w, [[0.6, 0.8]], rtol=0, atol=1e-15)


def test_weight_norm_zero_gain():
    w = nk.weight_norm_effective(np.array([[3.0, 4.0]]), np.array([0.0]))
    assert np.all(w == 0)


def test_weight_norm_zero_direction_raises():
    with pytest.raises(NumericError):
        nk.weight_norm_effective(np.zeros((1, 1, 3)), np.ones(1))


@settings(max_examples=100, deadline=None)
@given(alpha=st.floats(1e-3, 1e3), seed=st.integers(0, 2**31))
def test_weight_norm_scale_invariance(alpha, seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-1, 1, (3, 2, 4))
    g = rng.uniform(-2, 2, 3)
    np.testing.assert_allclose(
        nk.weight_norm_effective(alpha * v, g), nk.weight_norm_effective(v, g), rtol=0, atol=1e-12
    )


# --- causal conv -----------------------------------------------------------

@pytest.mark.parametrize("method", nk.CONV_METHODS)
def test_conv_identity_kernel(method, rng):
    x = rng.standard_normal((1, 10))
    y = nk.conv1d_causal(x, conv([[[1.0]]], [1.0], [0.0]), method)
    np.testing.assert_allclose(y, x, atol=1e-12)


@pytest.mark.parametrize("method", nk.CONV_METHODS)
def test_conv_dilated_example(method):
    # brute force over the padded sequence [0, 0, 1, 2, 3, 4] with taps at offsets 0 and 2
    padded = [0, 0, 1, 2, 3, 4]
    expected = [padded[t] + padded[t + 2] for t in range(4)]
    assert expected == [1, 2, 4, 6]
    p = conv([[[1.0, 1.0]]], [math.sqrt(2)], [0.0], d=2)
    y = nk.conv1d_causal(np.array([[1.0, 2.0, 3.0, 4.0]]), p, method)
    np.testing.assert_allclose(y[0], expected, atol=1e-12)


@pytest.mark.parametrize("method", nk.CONV_METHODS)
def test_conv_zero_input(method, rng):
    p = random_conv(rng)
    p.bias[:] = 0
    assert np.all(nk.conv1d_causal(np.zeros((2, 16)), p, method) == 0)


def test_conv_brute_force_oracle(rng):
    p = random_conv(rng, 3, 2, 4, 3)
    x = rng.standard_normal((2, 2, 25))
    w = nk.weight_norm_effective(p.direction, p.gain)
    ref = np.zeros((2, 3, 25))
    for b in range(2):
        for o in range(3):
            for t in range(25):
                acc = p.bias[o]
                for i in range(2):
                    for k in range(4):
                        src = t - (4 - 1 - k) * 3
                        if src >= 0:
                            acc += w[o, i, k] * x[b, i, src]
                ref[b, o, t] = acc
    for method in nk.CONV_METHODS:
        np.testing.assert_allclose(nk.conv1d_causal(x, p, method), ref, atol=1e-12)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        nk.conv1d_causal(np.zeros((3, 8)), random_conv(rng, in_ch=2))


def test_conv_non_finite_input(rng):
    x = np.zeros((2, 8))
    x[0, 3] = np.nan
    with pytest.raises(NumericError):
        nk.conv1d_causal(x, random_conv(rng))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.integers(0, 30), d=st.integers(1, 5))
def test_conv_causality_bit_exact(seed, t, d):
    rng = np.random.default_rng(seed)
    p = random_conv(rng, 3, 2, 4, d)
    x = rng.standard_normal((2, 32))
    x2 = x.copy()
    x2[:, t + 1 :] = rng.standard_normal((2, 32 - t - 1))
    y1 = nk.conv1d_causal(x, p)
    y2 = nk.conv1d_causal(x2, p)
    assert np.array_equal(y1[:, : t + 1], y2[:, : t + 1])


@pytest.mark.parametrize("k,d", [(1, 1), (3, 1), (5, 4), (64, 8)])
def test_conv_length_preserved(k, d, rng):
    p = random_conv(rng, 2, 1, k, d)
    for method in nk.CONV_METHODS:
        assert nk.conv1d_causal(rng.standard_normal((1, 100)), p, method).shape == (2, 100)


def test_fft_matches_direct_float32(rng):
    p = random_conv(rng, 8, 8, 64, 8)
    p = nk.ConvParams(*(a.astype(np.float32) for a in (p.direction, p.gain, p.bias)), p.dilation)
    x = rng.standard_normal((4, 8, 1024)).astype(np.float32)
    a = nk.conv1d_causal(x, p, "direct")
    b = nk.conv1d_causal(x, p, "fft")
    assert b.dtype == np.float32
    np.testing.assert_allclose(a, b, atol=2e-4 * np.abs(a).max())


# --- conv backward ---------------------------------------------------------

def test_conv_backward_zero_grad(rng):
    p = random_conv(rng)
    x = rng.standard_normal((2, 8))
    for g in nk.conv1d_backward(x, p, np.zeros((2, 8))):
        assert np.all(g == 0)


def test_conv_backward_shape_error(rng):
    with pytest.raises(ShapeError):
        nk.conv1d_backward(np.zeros((2, 8)), random_conv(rng), np.zeros((2, 7)))


@pytest.mark.parametrize("method", nk.CONV_METHODS)
@pytest.mark.parametrize("d", [1, 2])
def test_conv_backward_finite_differences(method, d, rng):
    p = random_conv(rng, 2, 2, 3, d)
    x = rng.uniform(-1, 1, (2, 8))
    proj = rng.uniform(-1, 1, (2, 8))

    def f():
        return float(np.sum(proj * nk.conv1d_causal(x, p, method)))

    grads = nk.conv1d_backward(x, p, proj, method)
    for analytic, arr in zip(grads, (x, p.direction, p.gain, p.bias)):
        numeric = numeric_grad(f, arr).reshape(arr.shape)
        assert rel_error(analytic, numeric).max() < 1e-4


def test_gain_gradient_by_hand():
    # y = g * sign(v) * x + b for a single 1x1 tap, so dL/dg = <grad_out, sign(v) * x>
    x = np.array([[0.5, -1.5, 2.0]])
    grad_out = np.array([[1.0, 2.0, -0.5]])
    p = conv([[[-2.0]]], [0.7], [0.1])
    _, _, grad_g, grad_b = nk.conv1d_backward(x, p, grad_out)
    by_hand = (1.0 * -0.5) + (2.0 * 1.5) + (-0.5 * -2.0)
    assert grad_g[0] == pytest.approx(by_hand, abs=1e-14)
    assert grad_b[0] == pytest.approx(2.5, abs=1e-14)


# --- activations -----------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(nk.relu(np.array([-5.0, 5.0])), [0.0, 5.0])


def test_sigmoid_values():
    assert nk.sigmoid(np.array([0.0]))[0] == 0.5
    y = nk.sigmoid(np.array([-800.0, 800.0, -30.0, 30.0]))
    assert np.all(np.isfinite(y))
    assert np.all((y > 0) & (y < 1))
    y32 = nk.sigmoid(np.array([-200.0, 200.0], dtype=np.float32))
    assert y32.dtype == np.float32 and np.all((y32 > 0) & (y32 < 1))


def test_sigmoid_backward_at_zero():
    y = nk.sigmoid(np.array([0.0]))
    assert nk.sigmoid_backward(y, np.array([1.0]))[0] == 0.25


def test_activation_gradients(rng):
    x = rng.uniform(-1, 1, 20)
    proj = rng.uniform(-1, 1, 20)
    num = numeric_grad(lambda: float(np.sum(proj * nk.sigmoid(x))), x)
    assert rel_error(nk.sigmoid_backward(nk.sigmoid(x), proj), num).max() < 1e-4
    num = numeric_grad(lambda: float(np.sum(proj * nk.relu(x))), x)
    assert rel_error(nk.relu_backward(x, proj), num).max() < 1e-4


# --- pooling and dense -----------------------------------------------------

def test_avg_pool_examples():
    np.testing.assert_allclose(nk.avg_pool(np.array([[1.0, 2.0, 3.0, 4.0]]), 2), [[1.5, 3.5]])
    np.testing.assert_allclose(nk.avg_pool(np.full((3, 8), 0.3), 4), np.full((3, 2), 0.3))
    assert nk.avg_pool(np.zeros((128, 1024)), 64).shape == (128, 16)


def test_avg_pool_indivisible():
    with pytest.raises(ShapeError):
        nk.avg_pool(np.zeros((1, 10)), 3)


def test_avg_pool_gradient(rng):
    x = rng.uniform(-1, 1, (2, 12))
    proj = rng.uniform(-1, 1, (2, 3))
    num = numeric_grad(lambda: float(np.sum(proj * nk.avg_pool(x, 4))), x).reshape(x.shape)
    assert rel_error(nk.avg_pool_backward(proj, 4), num).max() < 1e-4


def test_dense_examples():
    x = np.array([0.3, -0.2])
    np.testing.assert_array_equal(nk.dense(x, np.eye(2), np.zeros(2)), x)
    np.testing.assert_array_equal(nk.dense(np.array([1.0, 1.0]), np.array([[1.0], [2.0]]), np.array([3.0])), [6.0])


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        nk.dense(np.ones(3), np.ones((2, 2)), np.zeros(2))


def test_dense_gradient(rng):
    x = rng.uniform(-1, 1, (3, 4))
    W = rng.uniform(-1, 1, (4, 5))
    b = rng.uniform(-1, 1, 5)
    proj = rng.uniform(-1, 1, (3, 5))

    def f():
        return float(np.sum(proj * nk.dense(x, W, b)))

    for analytic, arr in zip(nk.dense_backward(x, W, proj), (x, W, b)):
        assert rel_error(analytic, numeric_grad(f, arr).reshape(arr.shape)).max() < 1e-4


# --- loss ------------------------------------------------------------------

def test_bce_perfect_prediction():
    loss, _ = nk.bce_loss(np.array([1 - 1e-7]), np.array([1.0]))
    assert loss == pytest.approx(0.0, abs=1e-6)


def test_bce_half():
    loss, _ = nk.bce_loss(np.full(360, 0.5), np.full(360, 0.5))
    assert loss == pytest.approx(0.6931471805599453, abs=1e-12)


def test_bce_gradient(rng):
    y_hat = rng.uniform(0.05, 0.95, (3, 7))
    y = rng.uniform(0, 1, (3, 7))
    _, grad = nk.bce_loss(y_hat, y)
    num = numeric_grad(lambda: nk.bce_loss(y_hat, y)[0], y_hat).reshape(y_hat.shape)
    assert rel_error(grad, num, floor=1e-8).max() < 1e-4


def test_bce_domain():
    with pytest.raises(ValueError):
        nk.bce_loss(np.array([0.5]), np.array([1.5]))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_bce_non_negative(seed):
    rng = np.random.default_rng(seed)
    y_hat = rng.uniform(0, 1, 50)
    y = rng.uniform(0, 1, 50)
    assert nk.bce_loss(y_hat, y)[0] >= 0


# --- adam ------------------------------------------------------------------

def test_adam_zero_gradient():
    params = {"w": np.array([1.0, -2.0])}
    nk.adam_step(params, {"w": np.zeros(2)}, state := nk.AdamState())
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_is_lr():
    params = {"w": np.array([1.0])}
    nk.adam_step(params, {"w": np.array([1.0])}, nk.AdamState())
    # bias-corrected m/sqrt(v) is exactly 1, so the step is lr up to epsilon
    assert params["w"][0] == pytest.approx(1.0 - 2e-4, abs=1e-11)


def test_adam_two_step_trace():
    # reference values from a 40-digit mpmath evaluation of the update rule
    params = {"w": np.array([1.0])}
    state = nk.AdamState()
    nk.adam_step(params, {"w": np.array([0.5])}, state)
    assert params["w"][0] == pytest.approx(0.999800000004, abs=1e-14)
    nk.adam_step(params, {"w": np.array([-1.0])}, state)
    assert params["w"][0] == pytest.approx(0.999873220708481131, abs=1e-14)
    assert state.step_count == 2


def test_adam_non_finite_gradient():
    with pytest.raises(NumericError):
        nk.adam_step({"w": np.zeros(1)}, {"w": np.array([np.inf])}, nk.AdamState())


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        nk.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nk.AdamState())
