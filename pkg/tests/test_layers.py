import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from convlstm.errors import ConfigError, DimensionError
from convlstm.layers import (ConvLayer, DropoutLayer, FcLayer, FlattenLayer, LcnLayer, MaxPoolLayer,
                             ReluLayer, dropout_forward, fc_backward, fc_forward, lcn_backward, lcn_forward,
                             softmax, softmax_cross_entropy)
from convlstm.tensor import ConvSpec
from oracles import lcn_loop, max_rel_error, numeric_grad


def _fc(w, b):
    layer = FcLayer("fc", w.shape[1], w.shape[0], np.float64)
    layer.params["weights"][...] = w
    layer.params["bias"][...] = b
    return layer


def test_fc_identity_and_bias(rng):
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(fc_forward(_fc(np.eye(4), np.zeros(4)), x), x)
    b = rng.standard_normal(3)
    np.testing.assert_array_equal(fc_forward(_fc(np.zeros((3, 4)), b), x), b)


def test_fc_gradients(rng):
    layer = _fc(rng.standard_normal((3, 4)), rng.standard_normal(3))
    x = rng.standard_normal(4)
    r = rng.standard_normal(3)

    def loss():
        return float(fc_forward(layer, x) @ r)

    gx, gw, gb = fc_backward(layer, x, r)
    assert max_rel_error(gx, numeric_grad(loss, x)) <= 1e-6
    assert max_rel_error(gw, numeric_grad(loss, layer.params["weights"])) <= 1e-6
    assert max_rel_error(gb, numeric_grad(loss, layer.params["bias"])) <= 1e-6


def test_fc_dimension_errors(rng):
    layer = _fc(np.zeros((3, 4)), np.zeros(3))
    with pytest.raises(DimensionError):
        fc_forward(layer, np.zeros(5))
    with pytest.raises(DimensionError):
        fc_backward(layer, np.zeros(4), np.zeros(2))
    with pytest.raises(ConfigError):
        FcLayer("fc", 0, 3)


def test_conv_layer_gradients(rng):
    layer = ConvLayer("conv", ConvSpec(3, 1, 2, 2, 1), np.float64)
    layer.params["weights"][...] = rng.standard_normal(layer.params["weights"].shape)
    layer.params["bias"][...] = rng.standard_normal(2)
    x = rng.standard_normal((1, 2, 4, 4))
    y, cache = layer.forward(x)
    r = rng.standard_normal(y.shape)
    gx, grads = layer.backward(cache, r)

    def loss():
        return float(np.sum(layer.forward(x)[0] * r))

    assert max_rel_error(gx, numeric_grad(loss, x)) <= 1e-6
    for key in ("weights", "bias"):
        assert max_rel_error(grads[key], numeric_grad(loss, layer.params[key])) <= 1e-6
    assert grads["weights"].shape == layer.params["weights"].shape


def test_relu_pool_flatten_layers(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    y, cache = ReluLayer("r").forward(x)
    g, _ = ReluLayer("r").backward(cache, np.ones_like(x))
    np.testing.assert_array_equal(g, (x > 0).astype(float))
    pool = MaxPoolLayer("p", 2, 2)
    y, cache = pool.forward(x)
    assert y.shape == (2, 3, 2, 2) and pool.output_shape((3, 4, 4)) == (3, 2, 2)
    flat = FlattenLayer("f")
    y, cache = flat.forward(x)
    assert y.shape == (2, 48)
    assert flat.backward(cache, y)[0].shape == x.shape


# -- dropout -------------------------------------------------------------------

def test_dropout_zero_rate_and_eval(rng):
    x = rng.standard_normal((3, 5))
    y, mask = dropout_forward(DropoutLayer("d", 0.0), x, "train", rng)
    np.testing.assert_array_equal(y, x)
    assert np.all(mask == 1)
    y, mask = dropout_forward(DropoutLayer("d", 0.7), x, "eval")
    assert y is x and mask is None


def test_dropout_rejects_bad_rate():
    with pytest.raises(ConfigError):
        DropoutLayer("d", 1.0)
    layer = DropoutLayer("d", 0.5)
    layer.p = 1.0
    with pytest.raises(ConfigError):
        dropout_forward(layer, np.ones(3), "train")


def test_dropout_zero_fraction():
    x = np.ones(100_000)
    y, mask = dropout_forward(DropoutLayer("d", 0.5, seed=3), x, "train")
    frac = float(np.mean(y == 0))
    assert abs(frac - 0.5) <= 0.01
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_dropout_expectation():
    x = np.linspace(-1, 1, 50)
    layer = DropoutLayer("d", 0.3)
    r = np.random.default_rng(0)
    mean = np.mean([dropout_forward(layer, x, "train", r)[0] for _ in range(4000)], axis=0)
    # per entry std is |x| * sqrt(p/(1-p)) / sqrt(4000); 5 sigma bound
    bound = 5 * np.abs(x) * math.sqrt(0.3 / 0.7) / math.sqrt(4000) + 1e-12
    assert np.all(np.abs(mean - x) <= bound)


def test_dropout_backward_uses_mask(rng):
    layer = DropoutLayer("d", 0.5)
    x = rng.standard_normal(20)
    y, mask = layer.forward(x, train=True, rng=np.random.default_rng(5))
    g, _ = layer.backward(mask, np.ones(20))
    np.testing.assert_array_equal(g, mask * 2.0)
    assert layer.backward(None, np.ones(3))[0].tolist() == [1, 1, 1]


# -- LCN -------------------------------------------------------------------------

def test_lcn_constant_and_single_pixel():
    layer = LcnLayer("lcn", 5, 1e-4)
    # exact up to the roundoff of the box mean
    np.testing.assert_allclose(lcn_forward(layer, np.full((2, 6, 6), 3.7)), 0, atol=1e-12)
    assert lcn_forward(layer, np.array([[[4.2]]])).item() == 0


def test_lcn_matches_loop(rng):
    x = rng.standard_normal((1, 5, 5))
    np.testing.assert_allclose(lcn_forward(LcnLayer("lcn", 3, 1e-4), x), lcn_loop(x, 3, 1e-4), atol=1e-10)


@given(window=st.sampled_from([1, 3, 5]), h=st.integers(1, 7), w=st.integers(1, 7), seed=st.integers(0, 999))
def test_lcn_matches_loop_property(window, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, h, w))
    layer = LcnLayer("lcn", window, 1e-3)
    out = lcn_forward(layer, x)
    assert out.shape == x.shape
    np.testing.assert_allclose(out, lcn_loop(x, window, 1e-3), atol=1e-10)


def test_lcn_is_within_channel(rng):
    x = rng.standard_normal((2, 5, 5))
    layer = LcnLayer("lcn", 3)
    a = lcn_forward(layer, x)
    x2 = x.copy()
    x2[1] *= 10
    np.testing.assert_array_equal(lcn_forward(layer, x2)[0], a[0])


def test_lcn_removes_local_linear_trend():
    # an affine ramp equals its own window mean at interior pixels
    yy, xx = np.mgrid[0:9, 0:9].astype(float)
    out = lcn_forward(LcnLayer("lcn", 3, 1e-4), (0.3 * yy - 0.7 * xx + 2)[None])
    assert np.max(np.abs(out[0, 1:-1, 1:-1])) <= 1e-6


def test_lcn_backward(rng):
    layer = LcnLayer("lcn", 3, 1e-2)
    x = rng.standard_normal((2, 5, 5))
    r = rng.standard_normal(x.shape)
    g = lcn_backward(layer, x, r)
    num = numeric_grad(lambda: float(np.sum(lcn_forward(layer, x) * r)), x)
    assert max_rel_error(g, num) <= 1e-6


def test_lcn_config_errors():
    with pytest.raises(ConfigError):
        LcnLayer("lcn", 4)
    with pytest.raises(ConfigError):
        LcnLayer("lcn", 3, 0.0)


# -- softmax head ---------------------------------------------------------------------

@pytest.mark.parametrize("k", [2, 5, 51])
def test_softmax_uniform(k):
    loss, probs, grad = softmax_cross_entropy(np.zeros(k), 1)
    np.testing.assert_allclose(probs, 1.0 / k)
    assert loss == pytest.approx(math.log(k))
    assert abs(grad.sum()) <= 1e-12


def test_softmax_ce_gradient(rng):
    z = rng.standard_normal(5)
    _, _, grad = softmax_cross_entropy(z, 2)
    num = numeric_grad(lambda: softmax_cross_entropy(z, 2)[0], z)
    assert max_rel_error(grad, num) <= 1e-8


def test_softmax_ce_batch_sums(rng):
    z = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 1])
    loss, probs, grad = softmax_cross_entropy(z, labels)
    parts = [softmax_cross_entropy(z[i], labels[i]) for i in range(4)]
    assert loss == pytest.approx(sum(p[0] for p in parts))
    np.testing.assert_allclose(grad, np.stack([p[2] for p in parts]))


def test_softmax_label_range():
    with pytest.raises(IndexError):
        softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(IndexError):
        softmax_cross_entropy(np.zeros(3), -1)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20))
def test_softmax_is_distribution(z):
    p = softmax(np.array(z))
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-6
    _, _, grad = softmax_cross_entropy(np.array(z), 0)
    assert abs(grad.sum()) <= 1e-9
