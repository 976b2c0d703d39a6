"""Weight initialization, plain SGD, the training loop and gradient checking.

Determinism: shuffling uses a stream keyed by ``(seed, epoch)`` and dropout
masks use streams keyed by ``(seed, epoch, batch, chunk, layer)``.  Each
minibatch is cut into fixed-size chunks whose gradients are summed in chunk
order, so the worker count never changes the arithmetic.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError
from .layers import (ConvLayer, DropoutLayer, FcLayer, LcnLayer, MaxPoolLayer, ReluLayer,
                     softmax_cross_entropy)
from .lstm import (GateTransform, LstmCellParams, MergeMode, bidirectional_backward, bidirectional_forward,
                   lstm_backward, lstm_forward)
from .models import build_model, kink_signature, layer_kinks, loss_and_grads, model_forward, tiny_config
from .tensor import ConvSpec

log = logging.getLogger(__name__)

INIT_SCHEMES = ("he", "zero")
GRADCHECK_TOLERANCE = 1e-5


def worker_count():
    """Workers requested through ``CONVLSTM_THREADS`` (0 = serial)."""
    raw = os.environ.get("CONVLSTM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CONVLSTM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("CONVLSTM_THREADS must be >= 0")
    return n


def init_weights(model, scheme="he", seed=0):
    """He-scaled normal weights, zero biases, forget-gate biases set to 1."""
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    for name, value in model.named_params().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "b"):
            fill = 1.0 if name.endswith(".f.b") else 0.0
            new = np.full(value.shape, fill)
        elif scheme == "zero":
            new = np.zeros(value.shape)
        else:
            fan_in = int(np.prod(value.shape[1:]))
            new = rng.standard_normal(value.shape) * math.sqrt(2.0 / fan_in)
        model.set_param(name, new)
    return model


def sgd_step(model, grads, learning_rate):
    """In-place ``p -= lr * g``.  Non-finite gradients abort before any update."""
    params = model.named_params()
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    for name, g in grads.items():
        params[name] -= (learning_rate * g).astype(params[name].dtype, copy=False)
    return model


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    init: str = "he"
    precision: str = "single"
    chunk_size: int = 8
    center_inputs: bool = True
    threads: int | None = None  # None reads CONVLSTM_THREADS

    def validate(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1 or self.chunk_size < 1:
            raise ConfigError("epochs, batch_size and chunk_size must be positive")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be single or double, got {self.precision!r}")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init!r}")
        return self


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_acc: float
    val_acc: float | None = None

    def csv(self):
        val = "" if self.val_acc is None else repr(self.val_acc)
        return f"{self.epoch},{self.mean_loss!r},{self.train_acc!r},{val}"


@dataclass
class TrainState:
    model: object
    config: TrainConfig
    epoch: int = 0
    history: list = field(default_factory=list)
    best_val_acc: float | None = None
    best_params: dict | None = None

    @property
    def running_loss(self):
        return self.history[-1].mean_loss if self.history else float("nan")

    def log_csv(self):
        return "epoch,mean_loss,train_acc,val_acc\n" + "".join(r.csv() + "\n" for r in self.history)


def stack_samples(samples, kind):
    """Stack ``SequenceSample``s into model input and label arrays."""
    if not samples:
        raise ValueError("no samples")
    frames = [np.stack(s.frames) for s in samples]
    shape = frames[0].shape
    for f in frames:
        if f.shape != shape:
            raise ValueError(f"samples differ in shape: {shape} vs {f.shape}")
    x = np.stack(frames)
    if kind == "baseline":
        if shape[0] != 1:
            raise ValueError("baseline samples must be single frames; see data.frames_as_samples")
        x = x[:, 0]
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return x, labels


def predict_batches(model, x, batch_size=64):
    out = [model_forward(model, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def _chunk_grads(model, x, y, key):
    return loss_and_grads(model, x, y, train=True, dropout_key=key)


def train_loop(model, samples, config, val_samples=None, on_epoch=None):
    """Minibatch SGD for ``config.epochs`` epochs; returns the :class:`TrainState`."""
    config.validate()
    x, y = stack_samples(samples, model.kind)
    x = x.astype(model.dtype)
    val = None
    if val_samples:
        val = stack_samples(val_samples, model.kind)
    if config.center_inputs:
        axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
        model.input_mean = x.mean(axis=axes).astype(model.dtype)

    threads = worker_count() if config.threads is None else config.threads
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 0 else None
    state = TrainState(model, config)
    n = len(x)
    try:
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng((config.seed, epoch)).permutation(n)
            total = 0.0
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                chunks = [idx[i:i + config.chunk_size] for i in range(0, len(idx), config.chunk_size)]
                args = [(model, x[c], y[c], (config.seed, epoch, b, j)) for j, c in enumerate(chunks)]
                if pool is None:
                    results = [_chunk_grads(*a) for a in args]
                else:
                    results = list(pool.map(lambda a: _chunk_grads(*a), args))
                loss = 0.0
                grads = None
                for chunk_loss, _, chunk_grads in results:
                    loss += chunk_loss
                    if grads is None:
                        grads = chunk_grads
                    else:
                        for k in grads:
                            grads[k] = grads[k] + chunk_grads[k]
                if not math.isfinite(loss):
                    raise TrainingError(f"loss diverged at epoch {epoch}, batch {b}")
                scale = 1.0 / len(idx)
                try:
                    sgd_step(model, {k: g * scale for k, g in grads.items()}, config.learning_rate)
                except TrainingError as exc:
                    raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
                total += loss
            train_acc = float(np.mean(predict_batches(model, x).argmax(axis=1) == y))
            val_acc = None
            if val is not None:
                val_acc = float(np.mean(predict_batches(model, val[0]).argmax(axis=1) == val[1]))
                if state.best_val_acc is None or val_acc > state.best_val_acc:
                    state.best_val_acc = val_acc
                    state.best_params = model.copy_params()
            record = EpochRecord(epoch, total / n, train_acc, val_acc)
            state.history.append(record)
            state.epoch = epoch
            log.info("epoch %d loss %.5f train_acc %.4f val_acc %s", epoch, record.mean_loss, train_acc, val_acc)
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if pool is not None:
            pool.shutdown()
    return state


# -- gradient checking -------------------------------------------------------

# Gradients are compared isclose-style: rtol 1e-5 with an absolute floor of
# 1e-9, i.e. the relative error denominator never drops below 1e-4.  Central
# differences at eps=1e-5 carry ~1e-11 of roundoff, so a smaller floor turns
# gradients that are zero by construction into spurious failures.
ERROR_FLOOR = 1e-4


def relative_error(a, n, floor=1e-12):
    return abs(a - n) / max(abs(a), abs(n), floor)


class GradCheckReport(dict):
    """Max relative error per tensor; ``skipped`` counts coordinates at kinks."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.skipped = {}

    def worst(self):
        name = max(self, key=self.get)
        return name, self[name]

    def passed(self, tolerance=GRADCHECK_TOLERANCE):
        return all(v <= tolerance for v in self.values())


def finite_difference_check(loss_fn, arrays, analytic, epsilon=1e-5, coords=20, seed=0,
                            floor=ERROR_FLOOR):
    """Compare ``analytic`` gradients with central differences of ``loss_fn()``.

    ``arrays`` maps names to arrays that ``loss_fn`` reads by reference; each is
    perturbed in place and restored.  Tensors with at most ``coords`` entries are
    checked exhaustively, larger ones at ``coords`` random positions.

    ``loss_fn`` may return ``(loss, signature)``; a coordinate whose signature
    differs between the two perturbed evaluations straddles a kink (ReLU switch,
    new max-pool winner) and is replaced by another random coordinate.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport()

    def evaluate():
        out = loss_fn()
        return out if isinstance(out, tuple) else (out, None)

    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise ConfigError(f"{name}: gradient checks need double precision")
        grad = np.asarray(analytic[name]).reshape(-1)
        candidates = rng.permutation(arr.size)
        worst, checked, skipped = 0.0, 0, 0
        for pos in candidates:
            if checked >= coords:
                break
            orig = arr.flat[pos]
            arr.flat[pos] = orig + epsilon
            up, sig_up = evaluate()
            arr.flat[pos] = orig - epsilon
            down, sig_down = evaluate()
            arr.flat[pos] = orig
            if sig_up != sig_down:
                skipped += 1
                continue
            worst = max(worst, relative_error(grad[pos], (up - down) / (2 * epsilon), floor))
            checked += 1
        report[name] = worst
        report.skipped[name] = skipped
    return report


def grad_check(model, sample, epsilon=1e-5, coords=20, seed=0):
    """Max relative error per parameter tensor for one ``(x, labels)`` sample.

    Runs in eval mode, so dropout is off.
    """
    if model.dtype != np.float64:
        raise ConfigError("grad_check needs a double-precision model")
    x, labels = sample
    labels = np.atleast_1d(labels)
    _, _, grads = loss_and_grads(model, x, labels)

    def loss():
        _, cache = model_forward(model, x)
        return softmax_cross_entropy(cache[3], labels)[0], kink_signature(model, cache)

    return finite_difference_check(loss, model.named_params(), grads, epsilon, coords, seed)


def _layer_check(layer, x, rng, train=False, seed=0):
    """Check a layer's parameter and input gradients under ``L = <R, layer(x)>``."""
    dropout_seed = int(rng.integers(2**31))
    y, _ = layer.forward(x, train, np.random.default_rng(dropout_seed))
    r = rng.standard_normal(y.shape)

    def loss():
        out, c = layer.forward(x, train, np.random.default_rng(dropout_seed))
        return float(np.sum(out * r)), layer_kinks(layer, c)

    _, cache = layer.forward(x, train, np.random.default_rng(dropout_seed))
    gx, pgrads = layer.backward(cache, r)
    arrays = dict(layer.params)
    arrays["input"] = x
    return finite_difference_check(loss, arrays, dict(pgrads, input=gx), seed=seed)


def _random_params(params, rng, scale=0.5):
    for value in params.values():
        value[...] = rng.standard_normal(value.shape) * scale


def _lstm_check(transform, in_size, x_shape, steps, rng, use_forget_gate=True, seed=0):
    cell = LstmCellParams(transform, in_size, use_forget_gate)
    _random_params(cell.params, rng)
    xs = [rng.standard_normal(x_shape) for _ in range(steps)]
    hs, caches = lstm_forward(xs, cell)
    rs = [rng.standard_normal(h.shape) for h in hs]

    def loss():
        return float(sum(np.sum(h * r) for h, r in zip(lstm_forward(xs, cell)[0], rs)))

    grads, gxs, _ = lstm_backward(cell, caches, rs)
    arrays = dict(cell.params)
    analytic = dict(grads)
    for t, x in enumerate(xs):
        arrays[f"x{t}"] = x
        analytic[f"x{t}"] = gxs[t]
    return finite_difference_check(loss, arrays, analytic, seed=seed)


def _bidirectional_check(merge, rng, seed=0):
    transform = GateTransform.convolutional(3, 2)
    fwd, bwd = LstmCellParams(transform, 2), LstmCellParams(transform, 2)
    _random_params(fwd.params, rng)
    _random_params(bwd.params, rng)
    xs = [rng.standard_normal((2, 2, 3, 3)) for _ in range(3)]
    merged, cache = bidirectional_forward(xs, fwd, bwd, merge)
    r = rng.standard_normal(merged.shape)

    def loss():
        return float(np.sum(bidirectional_forward(xs, fwd, bwd, merge)[0] * r))

    g_f, g_b, gxs = bidirectional_backward(fwd, bwd, cache, r)
    arrays = {f"fwd.{k}": v for k, v in fwd.params.items()}
    arrays.update({f"bwd.{k}": v for k, v in bwd.params.items()})
    analytic = {f"fwd.{k}": v for k, v in g_f.items()}
    analytic.update({f"bwd.{k}": v for k, v in g_b.items()})
    for t, x in enumerate(xs):
        arrays[f"x{t}"] = x
        analytic[f"x{t}"] = gxs[t]
    return finite_difference_check(loss, arrays, analytic, seed=seed)


def _softmax_check(rng, seed=0):
    logits = rng.standard_normal((3, 5))
    labels = np.array([0, 3, 4])
    _, _, grad = softmax_cross_entropy(logits, labels)
    return finite_difference_check(lambda: softmax_cross_entropy(logits, labels)[0],
                                   {"logits": logits}, {"logits": grad}, seed=seed)


def tiny_model_check(kind, gates="conv", seed=0):
    cfg = tiny_config(kind, gates)
    model = build_model(kind, cfg, np.float64)
    init_weights(model, "he", seed)
    rng = np.random.default_rng(seed + 1)
    frame = (cfg.input_channels, cfg.input_height, cfg.input_width)
    shape = (2,) + frame if kind == "baseline" else (2, cfg.sequence_length) + frame
    x = rng.standard_normal(shape)
    labels = rng.integers(cfg.num_classes, size=2)
    return grad_check(model, (x, labels), seed=seed)


def gradcheck_suite(target="all", gates="conv", seed=0):
    """Named gradient-check reports for the tiny presets.

    ``target`` is one of ``layers``, ``lstm``, ``baseline``, ``motion`` or
    ``all``; ``gates`` selects the LSTM gate kind used by the motion model.
    """
    rng = np.random.default_rng(seed)
    checks = {}
    if target in ("layers", "all"):
        checks["layer.conv"] = _layer_check(_seeded(ConvLayer("conv", ConvSpec(3, 2, 2, 3, 1), np.float64), rng),
                                            rng.standard_normal((2, 2, 5, 5)), rng)
        checks["layer.fc"] = _layer_check(_seeded(FcLayer("fc", 4, 3, np.float64), rng),
                                          rng.standard_normal((2, 4)), rng)
        checks["layer.relu"] = _layer_check(ReluLayer("relu"), rng.standard_normal((2, 3, 4, 4)), rng)
        checks["layer.maxpool"] = _layer_check(MaxPoolLayer("pool", 2, 2), rng.standard_normal((2, 2, 6, 6)), rng)
        checks["layer.lcn"] = _layer_check(LcnLayer("lcn", 3, 1e-4), rng.standard_normal((2, 2, 5, 5)), rng)
        checks["layer.dropout"] = _layer_check(DropoutLayer("dropout", 0.5), rng.standard_normal((2, 6)), rng,
                                               train=True)
        checks["layer.softmax_ce"] = _softmax_check(rng)
    if target in ("lstm", "all"):
        checks["lstm.fc"] = _lstm_check(GateTransform.fully_connected(4), 3, (2, 3), 3, rng)
        checks["lstm.conv"] = _lstm_check(GateTransform.convolutional(3, 3), 2, (2, 2, 4, 4), 3, rng)
        checks["lstm.conv_no_forget"] = _lstm_check(GateTransform.convolutional(3, 2), 2, (1, 2, 3, 3), 3, rng,
                                                    use_forget_gate=False)
        checks["lstm.bidirectional_concat"] = _bidirectional_check(MergeMode.CONCAT, rng)
        checks["lstm.bidirectional_sum"] = _bidirectional_check(MergeMode.SUM, rng)
    if target in ("baseline", "all"):
        checks["model.baseline"] = tiny_model_check("baseline", seed=seed)
    if target in ("motion", "all"):
        checks[f"model.motion.{gates}"] = tiny_model_check("motion", gates, seed=seed)
    if not checks:
        raise ConfigError(f"unknown gradcheck target {target!r}")
    return checks


def _seeded(layer, rng):
    _random_params(layer.params, rng)
    return layer
