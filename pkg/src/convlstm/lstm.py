"""LSTM cell with fully-connected or convolutional gate transforms.

One step computes, in this order::

    i  = sigmoid(W_i x + U_i h_prev + b_i)
    c~ = tanh(W_c x + U_c h_prev + b_c)
    f  = sigmoid(W_f x + U_f h_prev + b_f)
    C  = i * c~ + f * C_prev           (or i * c~ + C_prev without forget gate)
    o  = sigmoid(W_o x + U_o h_prev + V_o C + b_o)
    h  = o * tanh(C)

The peephole ``V_o`` only feeds the output gate and reads the freshly
computed ``C``.  With convolutional gates every transform (W, U and V_o) is a
stride-1 convolution with "same" padding, so ``h`` and ``C`` keep the spatial
extent of ``x`` and the recurrence stays well-formed.

All tensors carry a leading batch axis: ``(N, D)`` for fully-connected gates,
``(N, C, H, W)`` for convolutional ones.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import zeros

GATES_WITH_FORGET = ("i", "c", "f", "o")
GATES_LEGACY = ("i", "c", "o")


@dataclass(frozen=True)
class GateTransform:
    kind: str
    hidden_dim: int = 0
    filter_size: int = 5
    depth: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind == "fc":
            if self.hidden_dim < 1:
                raise ConfigError("fully-connected gates need hidden_dim >= 1")
        elif self.kind == "conv":
            if self.depth < 1:
                raise ConfigError("convolutional gates need depth >= 1")
            if self.filter_size < 1 or self.filter_size % 2 == 0:
                raise ConfigError(f"gate filter size must be odd, got {self.filter_size}")
            if self.stride != 1:
                raise ConfigError("convolutional gates must use stride 1 to keep recurrent shapes stable")
        else:
            raise ConfigError(f"unknown gate kind {self.kind!r}")

    @classmethod
    def fully_connected(cls, hidden_dim):
        return cls("fc", hidden_dim=hidden_dim)

    @classmethod
    def convolutional(cls, filter_size, depth, stride=1):
        return cls("conv", filter_size=filter_size, depth=depth, stride=stride)

    @property
    def units(self):
        """Number of channels (conv) or hidden units (fc) per gate."""
        return self.depth if self.kind == "conv" else self.hidden_dim


class MergeMode(str, enum.Enum):
    CONCAT = "concat_channels"
    SUM = "elementwise_sum"


class LstmCellParams:
    """Weights of one LSTM direction, stored per gate as ``{gate}.{W|U|b}`` plus ``o.V``."""

    def __init__(self, transform, input_size, use_forget_gate=True, dtype=np.float64, allocate=True):
        self.transform = transform
        self.input_size = input_size
        self.use_forget_gate = use_forget_gate
        d = transform.units
        if transform.kind == "fc":
            w_shape, u_shape = (d, input_size), (d, d)
        else:
            k = transform.filter_size
            w_shape, u_shape = (d, input_size, k, k), (d, d, k, k)
        self.params = {}
        for g in self.gates:
            self.params[f"{g}.W"] = zeros(w_shape, dtype, allocate)
            self.params[f"{g}.U"] = zeros(u_shape, dtype, allocate)
            self.params[f"{g}.b"] = zeros(d, dtype, allocate)
        self.params["o.V"] = zeros(u_shape, dtype, allocate)

    @property
    def gates(self):
        return GATES_WITH_FORGET if self.use_forget_gate else GATES_LEGACY

    @property
    def dtype(self):
        return self.params["i.W"].dtype

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def astype(self, dtype):
        for key, value in self.params.items():
            self.params[key] = value.astype(dtype)
        return self

    def copy(self):
        other = LstmCellParams(self.transform, self.input_size, self.use_forget_gate, self.dtype)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    # -- gate transforms ------------------------------------------------

    def _conv_spec(self, in_channels, out_channels):
        k = self.transform.filter_size
        return T.ConvSpec(k, 1, in_channels, out_channels, (k - 1) // 2)

    def apply(self, weights, x):
        if self.transform.kind == "fc":
            return x @ weights.T
        return T.conv2d_forward(x, weights, None, self._conv_spec(weights.shape[1], weights.shape[0]))

    def apply_backward(self, weights, x, grad):
        """Return ``(grad_x, grad_weights)`` of :meth:`apply`."""
        if self.transform.kind == "fc":
            return grad @ weights, grad.T @ x
        gx, gw, _ = T.conv2d_backward(x, weights, self._conv_spec(weights.shape[1], weights.shape[0]), grad)
        return gx, gw

    def bias(self, gate, ndim):
        b = self.params[f"{gate}.b"]
        return b.reshape((1, -1) + (1,) * (ndim - 2))

    def stacked(self, kind):
        return np.concatenate([self.params[f"{g}.{kind}"] for g in self.gates], axis=0)

    def state_shape(self, x_shape):
        if self.transform.kind == "fc":
            if len(x_shape) != 2 or x_shape[1] != self.input_size:
                raise DimensionError(f"fc gates expect input (N, {self.input_size}), got {x_shape}")
            return (x_shape[0], self.transform.hidden_dim)
        if len(x_shape) != 4 or x_shape[1] != self.input_size:
            raise DimensionError(f"conv gates expect input (N, {self.input_size}, H, W), got {x_shape}")
        return (x_shape[0], self.transform.depth) + tuple(x_shape[2:])


@dataclass
class LstmState:
    C: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        if self.C.shape != self.h.shape:
            raise DimensionError(f"memory cell {self.C.shape} and output {self.h.shape} differ in shape")

    @classmethod
    def zeros(cls, shape, dtype=np.float64):
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


def _initial_state(x, params, initial):
    shape = params.state_shape(x.shape)
    if initial is None:
        return LstmState.zeros(shape, dtype=x.dtype)
    if initial.C.shape != shape:
        raise DimensionError(f"state shape {initial.C.shape} incompatible with gate output {shape}")
    return initial


def _split(z, n_gates):
    return np.split(z, n_gates, axis=1)


def _step(x, prev, params, w_stack, u_stack):
    gates = params.gates
    z = params.apply(w_stack, x) + params.apply(u_stack, prev.h)
    parts = dict(zip(gates, _split(z, len(gates))))
    nd = x.ndim if params.transform.kind == "conv" else 2
    i = T.sigmoid(parts["i"] + params.bias("i", nd))
    c_hat = np.tanh(parts["c"] + params.bias("c", nd))
    if params.use_forget_gate:
        f = T.sigmoid(parts["f"] + params.bias("f", nd))
        C = i * c_hat + f * prev.C
    else:
        f = None
        C = i * c_hat + prev.C
    o = T.sigmoid(parts["o"] + params.apply(params.params["o.V"], C) + params.bias("o", nd))
    tanh_c = np.tanh(C)
    h = o * tanh_c
    cache = (x, prev, i, c_hat, f, C, o, tanh_c)
    return LstmState(C, h), cache


def lstm_step(x_t, prev, params):
    """One cell update.  Returns ``(h_t, next_state)``."""
    prev = _initial_state(x_t, params, prev)
    state, _ = _step(x_t, prev, params, params.stacked("W"), params.stacked("U"))
    return state.h, state


def lstm_forward(xs, params, initial=None):
    """Unroll over ``xs`` and keep the per-step caches needed by :func:`lstm_backward`."""
    if len(xs) == 0:
        raise ValueError("cannot unroll an empty sequence")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise DimensionError(f"sequence elements differ in shape: {shape} vs {x.shape}")
    state = _initial_state(xs[0], params, initial)
    w_stack, u_stack = params.stacked("W"), params.stacked("U")
    hs, caches = [], []
    for x in xs:
        state, cache = _step(x, state, params, w_stack, u_stack)
        hs.append(state.h)
        caches.append(cache)
    return hs, caches


def lstm_unroll(xs, params, initial=None):
    return lstm_forward(xs, params, initial)[0]


def lstm_backward(params, caches, grad_hs):
    """Backpropagate through time.

    Returns ``(param_grads, grad_xs, grad_initial_state)``; gradients from all
    timesteps are accumulated into one dict keyed like ``params.params``.
    """
    if len(grad_hs) != len(caches):
        raise ValueError(f"{len(grad_hs)} upstream gradients for {len(caches)} timesteps")
    gates = params.gates
    w_stack, u_stack = params.stacked("W"), params.stacked("U")
    v = params.params["o.V"]
    nd = caches[0][0].ndim if params.transform.kind == "conv" else 2
    sum_axes = (0,) + tuple(range(2, nd))

    grad_w = np.zeros_like(w_stack)
    grad_u = np.zeros_like(u_stack)
    grad_v = np.zeros_like(v)
    grad_b = {g: np.zeros_like(params.params[f"{g}.b"]) for g in gates}
    grad_xs = [None] * len(caches)
    dh_next = None
    dc_next = None

    for t in range(len(caches) - 1, -1, -1):
        x, prev, i, c_hat, f, C, o, tanh_c = caches[t]
        dh = grad_hs[t]
        if dh is None:
            dh = np.zeros_like(C)
        if dh.shape != C.shape:
            raise DimensionError(f"step {t}: upstream grad {dh.shape} != output {C.shape}")
        if dh_next is not None:
            dh = dh + dh_next
        d_o = dh * tanh_c * o * (1 - o)
        dC = dh * o * (1 - tanh_c * tanh_c)
        if dc_next is not None:
            dC = dC + dc_next
        gC, gV = params.apply_backward(v, C, d_o)
        dC = dC + gC
        grad_v += gV

        d_parts = {
            "i": dC * c_hat * i * (1 - i),
            "c": dC * i * (1 - c_hat * c_hat),
            "o": d_o,
        }
        if params.use_forget_gate:
            d_parts["f"] = dC * prev.C * f * (1 - f)
            dc_next = dC * f
        else:
            dc_next = dC
        dz = np.concatenate([d_parts[g] for g in gates], axis=1)
        for g in gates:
            grad_b[g] += d_parts[g].sum(axis=sum_axes)
        gx, gw = params.apply_backward(w_stack, x, dz)
        dh_next, gu = params.apply_backward(u_stack, prev.h, dz)
        grad_w += gw
        grad_u += gu
        grad_xs[t] = gx

    grads = {}
    for g, gw, gu in zip(gates, np.split(grad_w, len(gates)), np.split(grad_u, len(gates))):
        grads[f"{g}.W"] = gw
        grads[f"{g}.U"] = gu
        grads[f"{g}.b"] = grad_b[g]
    grads["o.V"] = grad_v
    return grads, grad_xs, LstmState(dc_next, dh_next)


def lstm_bptt(xs, params, initial, grad_hs):
    """Gradients of ``sum_t <grad_hs[t], h_t>``.  Returns ``(param_grads, grad_xs)``."""
    if len(grad_hs) != len(xs):
        raise ValueError(f"{len(grad_hs)} upstream gradients for a length-{len(xs)} sequence")
    _, caches = lstm_forward(xs, params, initial)
    grads, grad_xs, _ = lstm_backward(params, caches, grad_hs)
    return grads, grad_xs


# -- bidirectional -------------------------------------------------------

def _merge(hf, hb, merge):
    merge = MergeMode(merge)
    if merge is MergeMode.CONCAT:
        if hf.shape[0] != hb.shape[0] or hf.shape[2:] != hb.shape[2:]:
            raise DimensionError(f"cannot concatenate branch outputs {hf.shape} and {hb.shape}")
        return np.concatenate([hf, hb], axis=1)
    if hf.shape != hb.shape:
        raise DimensionError(f"sum merge needs equal branch shapes, got {hf.shape} and {hb.shape}")
    return hf + hb


def bidirectional_forward(xs, fwd, bwd, merge=MergeMode.CONCAT):
    """Run ``fwd`` over ``xs`` and ``bwd`` over ``xs`` reversed; merge the final outputs."""
    hs_f, caches_f = lstm_forward(xs, fwd)
    hs_b, caches_b = lstm_forward(list(xs)[::-1], bwd)
    merged = _merge(hs_f[-1], hs_b[-1], merge)
    return merged, (caches_f, caches_b, hs_f[-1].shape[1], MergeMode(merge))


def bidirectional_backward(fwd, bwd, cache, grad_merged):
    """Returns ``(fwd_grads, bwd_grads, grad_xs)`` with ``grad_xs`` in input order."""
    caches_f, caches_b, d_f, merge = cache
    if merge is MergeMode.CONCAT:
        g_f, g_b = grad_merged[:, :d_f], grad_merged[:, d_f:]
    else:
        g_f = g_b = grad_merged
    n = len(caches_f)
    grads_f, gx_f, _ = lstm_backward(fwd, caches_f, [None] * (n - 1) + [np.ascontiguousarray(g_f)])
    grads_b, gx_b, _ = lstm_backward(bwd, caches_b, [None] * (n - 1) + [np.ascontiguousarray(g_b)])
    grad_xs = [a + b for a, b in zip(gx_f, gx_b[::-1])]
    return grads_f, grads_b, grad_xs


def bidirectional_run(xs, fwd_params, bwd_params, merge=MergeMode.CONCAT):
    return bidirectional_forward(xs, fwd_params, bwd_params, merge)[0]
