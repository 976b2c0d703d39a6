"""Trainable and fixed layers built on the tensor kernels.

Every layer exposes ``forward(x, train=False, rng=None) -> (y, cache)`` and
``backward(cache, grad_y) -> (grad_x, param_grads)``.  Both are pure given the
parameters, so forward passes on different samples can run concurrently.
Inputs always carry a leading batch axis.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ConfigError, DimensionError


class Layer:
    name = ""
    params: dict

    def __init__(self, name=""):
        self.name = name
        self.params = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, cache, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        """Per-sample output shape for a per-sample input ``shape``."""
        return shape

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def astype(self, dtype):
        for key, value in self.params.items():
            self.params[key] = value.astype(dtype)
        return self

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def zeros(shape, dtype, allocate=True):
    """Zero parameter tensor; ``allocate=False`` returns a read-only, memory-free view
    that is only good for shape inspection and counting."""
    if allocate:
        return np.zeros(shape, dtype=dtype)
    return np.broadcast_to(np.zeros((), dtype=dtype), shape)


class ConvLayer(Layer):
    def __init__(self, name, spec, dtype=np.float32, allocate=True):
        super().__init__(name)
        self.spec = spec
        self.params = {
            "weights": zeros(spec.weight_shape, dtype, allocate),
            "bias": zeros(spec.out_channels, dtype, allocate),
        }

    def forward(self, x, train=False, rng=None):
        return T.conv2d_forward(x, self.params["weights"], self.params["bias"], self.spec), x

    def backward(self, cache, grad):
        gx, gw, gb = T.conv2d_backward(cache, self.params["weights"], self.spec, grad)
        return gx, {"weights": gw, "bias": gb}

    def output_shape(self, shape):
        if shape[0] != self.spec.in_channels:
            raise DimensionError(f"{self.name}: expects {self.spec.in_channels} channels, got {shape[0]}")
        return self.spec.output_shape(shape[1], shape[2])


class ReluLayer(Layer):
    def forward(self, x, train=False, rng=None):
        return T.relu(x), x

    def backward(self, cache, grad):
        return grad * (cache > 0), {}


class MaxPoolLayer(Layer):
    def __init__(self, name, window=2, stride=2):
        super().__init__(name)
        self.window = window
        self.stride = stride

    def forward(self, x, train=False, rng=None):
        return T.maxpool_forward(x, self.window, self.stride)

    def backward(self, cache, grad):
        return T.maxpool_backward(cache, grad), {}

    def output_shape(self, shape):
        c, h, w = shape
        if self.window > h or self.window > w:
            raise DimensionError(f"{self.name}: window {self.window} larger than input {(h, w)}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)


class FlattenLayer(Layer):
    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad):
        return grad.reshape(cache), {}

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class FcLayer(Layer):
    def __init__(self, name, in_dim, out_dim, dtype=np.float32, allocate=True):
        super().__init__(name)
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"{name}: dimensions must be positive, got {in_dim}->{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params = {
            "weights": zeros((out_dim, in_dim), dtype, allocate),
            "bias": zeros(out_dim, dtype, allocate),
        }

    def forward(self, x, train=False, rng=None):
        return fc_forward(self, x), x

    def backward(self, cache, grad):
        gx, gw, gb = fc_backward(self, cache, grad)
        return gx, {"weights": gw, "bias": gb}

    def output_shape(self, shape):
        if shape != (self.in_dim,):
            raise DimensionError(f"{self.name}: expects input ({self.in_dim},), got {shape}")
        return (self.out_dim,)


def fc_forward(layer, x):
    x = np.asarray(x)
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"{layer.name}: input length {x.shape[-1]} != in_dim {layer.in_dim}")
    return x @ layer.params["weights"].T + layer.params["bias"]


def fc_backward(layer, x, grad_out):
    """Return ``(grad_x, grad_weights, grad_bias)``; accepts single vectors or batches."""
    x = np.asarray(x)
    g = np.asarray(grad_out)
    if g.shape[-1] != layer.out_dim or g.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"{layer.name}: grad_out shape {g.shape} does not match output")
    w = layer.params["weights"]
    x2 = x.reshape(-1, layer.in_dim)
    g2 = g.reshape(-1, layer.out_dim)
    return g @ w, g2.T @ x2, g2.sum(axis=0)


class DropoutLayer(Layer):
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time."""

    def __init__(self, name, p=0.5, seed=0):
        super().__init__(name)
        if not 0 <= p < 1:
            raise ConfigError(f"{name}: dropout p must be in [0, 1), got {p}")
        self.p = p
        self.seed = seed

    def forward(self, x, train=False, rng=None):
        y, mask = dropout_forward(self, x, "train" if train else "eval", rng)
        return y, mask

    def backward(self, cache, grad):
        if cache is None:
            return grad, {}
        return grad * cache * (1.0 / (1.0 - self.p)), {}


def dropout_forward(layer, x, mode, rng=None):
    """Return ``(y, keep_mask)``.  ``keep_mask`` is None in eval mode."""
    if not 0 <= layer.p < 1:
        raise ConfigError(f"dropout p must be in [0, 1), got {layer.p}")
    if mode == "eval":
        return x, None
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if layer.p == 0:
        return x, np.ones_like(x)
    if rng is None:
        rng = np.random.default_rng(layer.seed)
    mask = (rng.random(x.shape) >= layer.p).astype(x.dtype)
    return x * mask * (1.0 / (1.0 - layer.p)), mask


# -- local contrast normalization ---------------------------------------

def _box_sum(x, window):
    r = window // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)])
    return sliding_window_view(xp, (window, window), axis=(-2, -1)).sum(axis=(-2, -1))


class LcnLayer(Layer):
    """Within-channel subtractive then divisive normalization.

    For each pixel, ``mu`` and ``var`` are the mean and variance over the
    in-bounds part of a ``window x window`` neighbourhood (out-of-bounds
    positions are excluded from the count), and the output is
    ``(x - mu) / sqrt(var + epsilon)``.
    """

    def __init__(self, name, window=5, epsilon=1e-4):
        super().__init__(name)
        if window < 1 or window % 2 == 0:
            raise ConfigError(f"{name}: LCN window must be odd and positive, got {window}")
        if epsilon <= 0:
            raise ConfigError(f"{name}: LCN epsilon must be positive")
        self.window = window
        self.epsilon = epsilon

    def _counts(self, h, w, dtype):
        return _box_sum(np.ones((h, w), dtype=dtype), self.window)

    def forward(self, x, train=False, rng=None):
        n = self._counts(x.shape[-2], x.shape[-1], x.dtype)
        mu = _box_sum(x, self.window) / n
        var = _box_sum(x * x, self.window) / n - mu * mu
        s = np.sqrt(np.maximum(var, 0) + self.epsilon)
        y = (x - mu) / s
        return y, (x, mu, s, y, n)

    def backward(self, cache, grad):
        x, mu, s, y, n = cache
        # box averaging with count normalization is A; its transpose is box_sum(./n)
        g_over_s = grad / s
        d_var = -0.5 * grad * y / (s * s)
        d_mu = -g_over_s - 2 * mu * d_var
        gx = g_over_s + _box_sum(d_mu / n, self.window) + 2 * x * _box_sum(d_var / n, self.window)
        return gx, {}


def lcn_forward(layer, x):
    x = np.asarray(x)
    if x.ndim == 3:
        return layer.forward(x[None])[0][0]
    return layer.forward(x)[0]


def lcn_backward(layer, x, grad_out):
    x = np.asarray(x)
    if x.ndim == 3:
        _, cache = layer.forward(x[None])
        return layer.backward(cache, np.asarray(grad_out)[None])[0][0]
    _, cache = layer.forward(x)
    return layer.backward(cache, grad_out)[0]


# -- classifier head -----------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Loss, probabilities and logit gradient for one example.

    ``logits`` may also be an ``(N, K)`` batch with an ``(N,)`` label array, in
    which case the loss and gradient are summed over the batch.
    """
    logits = np.asarray(logits)
    labels = np.atleast_1d(np.asarray(label))
    k = logits.shape[-1]
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"label {label!r} out of range for {k} classes")
    z = logits.reshape(-1, k)
    if z.shape[0] != labels.shape[0]:
        raise DimensionError(f"{z.shape[0]} logit rows but {labels.shape[0]} labels")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.sum(log_norm - shifted[rows, labels]))
    probs = np.exp(shifted - log_norm[:, None])
    grad = probs.copy()
    grad[rows, labels] -= 1
    return loss, probs.reshape(logits.shape), grad.reshape(logits.shape)
