"""Baseline CNN and bidirectional conv-LSTM motion model.

Baseline::

    conv1 -> relu -> pool -> conv2 -> relu -> pool -> LCN -> conv3 -> relu -> pool
      -> FC(fc_dim) -> relu -> dropout -> FC(fc_dim) -> relu -> dropout -> FC(classes)

Motion model: the same trunk is applied to every frame, followed by forward
and backward LSTM branches whose final outputs are merged and fed to an FC
head (``head_layers`` hidden FCs then the classifier).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .layers import (ConvLayer, DropoutLayer, FcLayer, FlattenLayer, LcnLayer, MaxPoolLayer,
                     ReluLayer, softmax, softmax_cross_entropy)
from .lstm import GateTransform, LstmCellParams, MergeMode, bidirectional_backward, bidirectional_forward

KINDS = ("baseline", "motion")


@dataclass
class ModelConfig:
    input_height: int = 64
    input_width: int = 64
    input_channels: int = 3
    num_classes: int = 51
    conv_channels: tuple = (64, 128, 128)
    conv_filters: tuple = (5, 3, 3)
    conv_strides: tuple = (2, 1, 1)
    same_padding: bool = True
    pool_window: int = 2
    pool_stride: int = 2
    lcn_after_pool: int = 2  # 0 disables LCN
    lcn_window: int = 5
    lcn_epsilon: float = 1e-4
    fc_dim: int = 4096
    fc_layers: int = 2
    head_layers: int = 1
    dropout_p: float = 0.5
    lstm_gates: str = "conv"
    lstm_filter: int = 5
    lstm_depth: int = 256
    lstm_hidden: int = 0  # fc gates only; 0 means depth * trunk height * trunk width
    use_forget_gate: bool = True
    merge: str = MergeMode.CONCAT.value
    sequence_length: int = 2

    def __post_init__(self):
        for name in ("conv_channels", "conv_filters", "conv_strides"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.merge = MergeMode(self.merge).value

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        n = len(self.conv_channels)
        if n == 0:
            raise ConfigError("the trunk needs at least one convolutional layer")
        if len(self.conv_filters) != n or len(self.conv_strides) != n:
            raise ConfigError("conv_channels, conv_filters and conv_strides must have equal length")
        if min(self.input_height, self.input_width, self.input_channels) < 1:
            raise ConfigError("input resolution must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.lstm_gates not in ("conv", "fc"):
            raise ConfigError(f"lstm_gates must be conv or fc, got {self.lstm_gates!r}")
        if self.fc_dim < 1 or self.fc_layers < 0 or self.head_layers < 0:
            raise ConfigError("fc_dim must be positive and layer counts nonnegative")
        if self.lcn_after_pool < 0 or self.lcn_after_pool > n:
            raise ConfigError(f"lcn_after_pool must be in [0, {n}]")
        return self

    def trunk_specs(self):
        specs = []
        in_ch = self.input_channels
        for ch, k, s in zip(self.conv_channels, self.conv_filters, self.conv_strides):
            try:
                specs.append(T.ConvSpec(k, s, in_ch, ch, (k - 1) // 2 if self.same_padding else 0))
            except DimensionError as exc:
                raise ConfigError(str(exc)) from None
            in_ch = ch
        return specs

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        """Build from a mapping whose values may be strings (key=value files)."""
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = coerce_setting(key, raw, type(fields[key].default))
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def coerce_setting(key, raw, kind):
    if not isinstance(raw, str):
        return raw
    try:
        if kind is tuple:
            raw = raw.strip().strip("()[]")
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def full_config(**overrides):
    """Full-size layer widths at 64x64 input."""
    return ModelConfig(**overrides)


def desk_config(**overrides):
    base = dict(input_height=64, input_width=64, num_classes=2, conv_channels=(8, 16, 16),
                fc_dim=64, fc_layers=2, lstm_depth=16, lstm_filter=5)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(kind="baseline", gates="conv", **overrides):
    """Smallest configs used by gradient checks."""
    base = dict(input_height=8, input_width=8, num_classes=3, conv_channels=(4, 4, 4),
                conv_filters=(3, 3, 3), conv_strides=(1, 1, 1), fc_dim=16, lcn_window=3,
                lstm_gates=gates, lstm_filter=3, lstm_depth=3, lstm_hidden=5)
    if kind == "motion":
        base.update(input_height=16, input_width=16, fc_dim=8)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Model:
    kind: str
    config: ModelConfig
    trunk: list
    head: list
    fwd: LstmCellParams | None = None
    bwd: LstmCellParams | None = None
    input_mean: np.ndarray = field(default=None)
    dtype: type = np.float32

    def __post_init__(self):
        if self.input_mean is None:
            self.input_mean = np.zeros(self.config.input_channels, dtype=self.dtype)

    @property
    def layers(self):
        return list(self.trunk) + list(self.head)

    def named_params(self):
        """Ordered mapping of parameter name to the live array."""
        out = {}
        for layer in self.trunk:
            for key, value in layer.params.items():
                out[f"{layer.name}.{key}"] = value
        for branch, cell in (("fwd", self.fwd), ("bwd", self.bwd)):
            if cell is not None:
                for key, value in cell.params.items():
                    out[f"{branch}.{key}"] = value
        for layer in self.head:
            for key, value in layer.params.items():
                out[f"{layer.name}.{key}"] = value
        return out

    def _owner(self, name):
        prefix, key = name.split(".", 1)
        if prefix in ("fwd", "bwd"):
            return getattr(self, prefix).params, key
        for layer in self.layers:
            if layer.name == prefix:
                return layer.params, key
        raise KeyError(name)

    def set_param(self, name, value):
        store, key = self._owner(name)
        if store[key].shape != np.shape(value):
            raise DimensionError(f"{name}: shape {np.shape(value)} != {store[key].shape}")
        store[key] = np.array(value, dtype=self.dtype)

    def load_params(self, values):
        for name, value in values.items():
            self.set_param(name, value)

    def copy_params(self):
        return {k: v.copy() for k, v in self.named_params().items()}

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        for cell in (self.fwd, self.bwd):
            if cell is not None:
                cell.astype(dtype)
        self.input_mean = self.input_mean.astype(dtype)
        self.dtype = dtype
        return self

    def param_table(self):
        """``(name, count)`` rows for every parameterised block, in forward order."""
        rows = [(layer.name, layer.param_count()) for layer in self.trunk if layer.params]
        for branch, cell in (("lstm.fwd", self.fwd), ("lstm.bwd", self.bwd)):
            if cell is not None:
                rows.append((branch, cell.param_count()))
        rows += [(layer.name, layer.param_count()) for layer in self.head if layer.params]
        return rows

    def shape_chain(self):
        """Per-sample output shapes of the trunk and head layers, in order."""
        cfg = self.config
        shape = (cfg.input_channels, cfg.input_height, cfg.input_width)
        chain = []
        for layer in self.trunk:
            shape = layer.output_shape(shape)
            chain.append((layer.name, shape))
        if self.kind == "motion":
            d = self.fwd.transform.units
            lstm_shape = (d,) + shape[1:] if self.fwd.transform.kind == "conv" else (d,)
            merged = (2 * d,) + lstm_shape[1:] if MergeMode(cfg.merge) is MergeMode.CONCAT else lstm_shape
            chain.append(("lstm", merged))
            shape = merged
        for layer in self.head:
            shape = layer.output_shape(shape)
            chain.append((layer.name, shape))
        return chain


def param_count(obj):
    """Total number of scalar parameters of a model, layer or LSTM cell."""
    if isinstance(obj, Model):
        return sum(p.size for p in obj.named_params().values())
    return obj.param_count()


def _build_trunk(config, dtype, allocate):
    config.validate()
    layers = []
    shape = (config.input_channels, config.input_height, config.input_width)
    for idx, spec in enumerate(config.trunk_specs(), start=1):
        if spec.stride > min(shape[1], shape[2]):
            raise ConfigError(f"conv{idx}: stride {spec.stride} exceeds input extent {shape[1:]}")
        layers.append(ConvLayer(f"conv{idx}", spec, dtype, allocate))
        layers.append(ReluLayer(f"relu{idx}"))
        layers.append(MaxPoolLayer(f"pool{idx}", config.pool_window, config.pool_stride))
        if idx == config.lcn_after_pool:
            layers.append(LcnLayer("lcn", config.lcn_window, config.lcn_epsilon))
    for layer in layers:
        try:
            shape = layer.output_shape(shape)
        except DimensionError as exc:
            raise ConfigError(f"degenerate trunk shape at {layer.name}: {exc}") from None
    return layers, shape


def _build_head(in_dim, hidden_layers, config, dtype, allocate):
    layers = [FlattenLayer("flatten")]
    dim = in_dim
    for j in range(1, hidden_layers + 1):
        layers.append(FcLayer(f"fc{j}", dim, config.fc_dim, dtype, allocate))
        layers.append(ReluLayer(f"relu_fc{j}"))
        layers.append(DropoutLayer(f"dropout{j}", config.dropout_p))
        dim = config.fc_dim
    layers.append(FcLayer(f"fc{hidden_layers + 1}", dim, config.num_classes, dtype, allocate))
    return layers


def build_baseline(config, dtype=np.float32, allocate=True):
    """Single-frame CNN.  ``allocate=False`` builds a shape-only model for counting."""
    trunk, shape = _build_trunk(config, dtype, allocate)
    head = _build_head(int(np.prod(shape)), config.fc_layers, config, dtype, allocate)
    return Model("baseline", config, trunk, head, dtype=dtype)


def build_motion(config, dtype=np.float32, allocate=True):
    if config.sequence_length < 2:
        raise ConfigError(f"the motion model needs sequence_length >= 2, got {config.sequence_length}")
    trunk, shape = _build_trunk(config, dtype, allocate)
    c, h, w = shape
    if config.lstm_gates == "conv":
        transform = GateTransform.convolutional(config.lstm_filter, config.lstm_depth)
        in_size = c
        lstm_out = (config.lstm_depth, h, w)
    else:
        transform = GateTransform.fully_connected(config.lstm_hidden or config.lstm_depth * h * w)
        in_size = c * h * w
        lstm_out = (transform.hidden_dim,)
    fwd = LstmCellParams(transform, in_size, config.use_forget_gate, dtype, allocate)
    bwd = LstmCellParams(transform, in_size, config.use_forget_gate, dtype, allocate)
    merged = int(np.prod(lstm_out)) * (2 if MergeMode(config.merge) is MergeMode.CONCAT else 1)
    head = _build_head(merged, config.head_layers, config, dtype, allocate)
    return Model("motion", config, trunk, head, fwd, bwd, dtype=dtype)


def build_model(kind, config, dtype=np.float32, allocate=True):
    if kind == "baseline":
        return build_baseline(config, dtype, allocate)
    if kind == "motion":
        return build_motion(config, dtype, allocate)
    raise ConfigError(f"unknown model kind {kind!r}")


def lstm_counterpart(model):
    """The same motion model with fully-connected gates of equal hidden size."""
    cfg = dataclasses.replace(model.config, lstm_gates="fc", lstm_hidden=0)
    return build_motion(cfg, model.dtype, allocate=False)


def gate_param_counts(config):
    """LSTM parameters (both directions) with conv gates and with FC gates of equal depth."""
    counts = {}
    for gates in ("conv", "fc"):
        cfg = dataclasses.replace(config, lstm_gates=gates, lstm_hidden=0)
        model = build_motion(cfg, allocate=False)
        counts[gates] = model.fwd.param_count() + model.bwd.param_count()
    return counts


# -- forward / backward ---------------------------------------------------

def _dropout_rng(key, index):
    if key is None:
        return None
    return np.random.default_rng(tuple(key) + (index,))


def _run(layers, x, train, key, offset=0):
    caches = []
    for idx, layer in enumerate(layers):
        x, cache = layer.forward(x, train, _dropout_rng(key, offset + idx))
        caches.append(cache)
    return x, caches


def _run_backward(layers, caches, grad, grads):
    for layer, cache in zip(reversed(layers), reversed(caches)):
        grad, pgrads = layer.backward(cache, grad)
        for key, value in pgrads.items():
            grads[f"{layer.name}.{key}"] = value
    return grad


def _prepare_input(model, x):
    cfg = model.config
    x = np.asarray(x, dtype=model.dtype)
    frame = (cfg.input_channels, cfg.input_height, cfg.input_width)
    rank = 4 if model.kind == "baseline" else 5
    if x.ndim == rank - 1:
        x = x[None]
    if x.ndim != rank or x.shape[-3:] != frame:
        raise DimensionError(f"{model.kind} model expects input (..., {frame}), got {x.shape}")
    if model.kind == "motion" and x.shape[1] < 1:
        raise DimensionError("empty sequence")
    return x - model.input_mean.reshape(-1, 1, 1)


def model_forward(model, x, train=False, dropout_key=None):
    """Class probabilities and the cache needed by :func:`model_backward`.

    Baseline input is ``(N, C, H, W)``, motion input ``(N, T, C, H, W)``;
    unbatched inputs are accepted.  Dropout is only active when ``train`` is set,
    with masks drawn from streams keyed by ``dropout_key + (layer index,)``.
    """
    if train and dropout_key is None:
        dropout_key = (0,)
    if not train:
        dropout_key = None
    x = _prepare_input(model, x)
    if model.kind == "baseline":
        feats, trunk_caches = _run(model.trunk, x, train, dropout_key)
        lstm_cache = None
        merged = feats
    else:
        n, t = x.shape[:2]
        feats, trunk_caches = _run(model.trunk, x.reshape((n * t,) + x.shape[2:]), train, dropout_key)
        feats = feats.reshape((n, t) + feats.shape[1:])
        xs = [feats[:, s] for s in range(t)]
        if model.fwd.transform.kind == "fc":
            xs = [f.reshape(n, -1) for f in xs]
        merged, lstm_cache = bidirectional_forward(xs, model.fwd, model.bwd, model.config.merge)
        lstm_cache = (lstm_cache, feats.shape)
    logits, head_caches = _run(model.head, merged, train, dropout_key, offset=len(model.trunk))
    probs = softmax(logits)
    return probs, (trunk_caches, lstm_cache, head_caches, logits)


def model_backward(model, cache, grad_logits):
    """Parameter gradients given the gradient of the loss w.r.t. the logits."""
    trunk_caches, lstm_cache, head_caches, _ = cache
    grads = {}
    grad = _run_backward(model.head, head_caches, grad_logits, grads)
    if model.kind == "motion":
        inner, feat_shape = lstm_cache
        g_f, g_b, grad_xs = bidirectional_backward(model.fwd, model.bwd, inner, grad)
        for key, value in g_f.items():
            grads[f"fwd.{key}"] = value
        for key, value in g_b.items():
            grads[f"bwd.{key}"] = value
        n, t = feat_shape[:2]
        grad = np.stack([g.reshape((n,) + feat_shape[2:]) for g in grad_xs], axis=1)
        grad = grad.reshape((n * t,) + feat_shape[2:])
    _run_backward(model.trunk, trunk_caches, grad, grads)
    return {name: grads[name] for name in model.named_params()}


def loss_and_grads(model, x, labels, train=False, dropout_key=None):
    """Summed cross-entropy over the batch, probabilities and parameter gradients."""
    probs, cache = model_forward(model, x, train, dropout_key)
    loss, _, grad_logits = softmax_cross_entropy(cache[3], np.asarray(labels))
    return loss, probs, model_backward(model, cache, grad_logits)


def layer_kinks(layer, cache):
    """Bytes identifying the ReLU on/off states or max-pool winners of one forward call."""
    if isinstance(layer, ReluLayer):
        return np.packbits(cache > 0).tobytes()
    if isinstance(layer, MaxPoolLayer):
        return cache.indices.tobytes()
    return b""


def kink_signature(model, cache):
    """Kink state of a whole forward pass.

    Finite differences are only meaningful when this does not change across the
    perturbation.
    """
    trunk_caches, _, head_caches, _ = cache
    pairs = list(zip(model.trunk, trunk_caches)) + list(zip(model.head, head_caches))
    return b"|".join(layer_kinks(layer, c) for layer, c in pairs)


def predict(model, x):
    return model_forward(model, x)[0]


# -- snapshots -------------------------------------------------------------

def save_snapshot(model, directory, seed=None):
    """Write TEN1 parameter files plus ``model.meta`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, value in model.named_params().items():
        T.write_ten(directory / f"{name}.ten", value)
    T.write_ten(directory / "input_mean.ten", model.input_mean)
    lines = [f"kind={model.kind}"]
    for key, value in model.config.to_dict().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    lines.append(f"seed={'' if seed is None else seed}")
    (directory / "model.meta").write_text("\n".join(lines) + "\n")


def read_meta(path):
    meta = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{line_no}: expected key=value")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def load_snapshot(directory, dtype=np.float32):
    directory = Path(directory)
    meta = read_meta(directory / "model.meta")
    kind = meta.pop("kind", None)
    meta.pop("seed", None)
    model = build_model(kind, ModelConfig.from_dict(meta), dtype)
    for name in model.named_params():
        model.set_param(name, T.read_ten(directory / f"{name}.ten"))
    mean_path = directory / "input_mean.ten"
    if mean_path.exists():
        model.input_mean = T.read_ten(mean_path).astype(dtype)
    return model
