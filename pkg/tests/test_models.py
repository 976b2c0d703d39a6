import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from convlstm.errors import ConfigError, DimensionError
from convlstm.layers import ConvLayer, FcLayer
from convlstm.lstm import bidirectional_run
from convlstm.models import (ModelConfig, build_baseline, build_model, build_motion, desk_config, full_config,
                             gate_param_counts, load_snapshot, loss_and_grads, lstm_counterpart, model_forward,
                             param_count, read_meta, save_snapshot, tiny_config)
from convlstm.tensor import ConvSpec
from convlstm.train import grad_check, init_weights
from oracles import max_rel_error, numeric_grad


def closed_form_cell(gates, depth, in_ch, k, hidden=None, in_dim=None):
    """Parameters of one LSTM direction: 4 (or 3) gates of W, U, b plus the V_o peephole."""
    if hidden is None:
        return gates * (depth * in_ch * k * k + depth * depth * k * k + depth) + depth * depth * k * k
    return gates * (hidden * in_dim + hidden * hidden + hidden) + hidden * hidden


def test_full_trunk_shape_chain():
    model = build_baseline(full_config(), allocate=False)
    spatial = [shape[1] for name, shape in model.shape_chain() if name.startswith(("conv", "pool"))]
    assert spatial == [32, 16, 16, 8, 8, 4]
    names = [layer.name for layer in model.trunk]
    assert names.index("lcn") == names.index("pool2") + 1


def test_full_param_counts():
    model = build_baseline(full_config(), allocate=False)
    table = dict(model.param_table())
    assert table["conv1"] == 5 * 5 * 3 * 64 + 64
    assert table["conv2"] == 3 * 3 * 64 * 128 + 128
    assert table["conv3"] == 3 * 3 * 128 * 128 + 128
    assert table["fc1"] == 128 * 4 * 4 * 4096 + 4096
    assert table["fc2"] == 4096 * 4096 + 4096
    assert table["fc3"] == 208947
    assert param_count(model) == sum(table.values()) == 25_609_267


def test_full_model_zero_image_is_distribution():
    model = build_baseline(full_config())
    probs = model_forward(model, np.zeros((3, 64, 64)))[0]
    assert probs.shape == (1, 51) and abs(probs.sum() - 1) <= 1e-6


def test_param_count_closed_forms():
    assert param_count(ConvLayer("c", ConvSpec(3, 1, 2, 4))) == 76
    assert param_count(FcLayer("f", 4096, 51)) == 208947
    assert param_count(FcLayer("f", 1, 1)) == 2


def test_degenerate_configs():
    with pytest.raises(ConfigError):
        build_baseline(desk_config(conv_strides=(100, 1, 1)))
    with pytest.raises(ConfigError):
        build_baseline(desk_config(input_height=4, input_width=4))
    with pytest.raises(ConfigError):
        build_motion(desk_config(sequence_length=1))
    with pytest.raises(ConfigError):
        build_baseline(desk_config(conv_channels=(), conv_filters=(), conv_strides=()))
    with pytest.raises(ConfigError):
        build_baseline(desk_config(num_classes=1))
    with pytest.raises(ConfigError):
        build_model("rnn", desk_config())


def test_config_dict_round_trip():
    cfg = tiny_config("motion", "fc")
    text = {k: ",".join(map(str, v)) if isinstance(v, tuple) else str(v) for k, v in cfg.to_dict().items()}
    assert ModelConfig.from_dict(text) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": "1"})
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"fc_dim": "many"})


def _tiny(kind, gates="conv", seed=0, dtype=np.float64):
    model = build_model(kind, tiny_config(kind, gates), dtype)
    return init_weights(model, "he", seed)


def test_eval_forward_is_deterministic(rng):
    model = _tiny("motion")
    x = rng.standard_normal((3, 2, 3, 16, 16))
    a = model_forward(model, x)[0]
    b = model_forward(model, x)[0]
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-6)


def test_dropout_only_in_train_mode(rng):
    model = _tiny("baseline")
    x = rng.standard_normal((2, 3, 8, 8))
    p_eval = model_forward(model, x)[0]
    p_train = model_forward(model, x, train=True, dropout_key=(1,))[0]
    assert not np.allclose(p_eval, p_train)
    np.testing.assert_array_equal(p_train, model_forward(model, x, train=True, dropout_key=(1,))[0])


def test_input_shape_errors(rng):
    model = _tiny("baseline")
    with pytest.raises(DimensionError):
        model_forward(model, rng.standard_normal((2, 3, 9, 8)))
    with pytest.raises(DimensionError):
        model_forward(_tiny("motion"), rng.standard_normal((2, 2, 4, 16, 16)))
    # an unbatched sequence is accepted
    assert model_forward(_tiny("motion"), rng.standard_normal((2, 3, 16, 16)))[0].shape == (1, 3)


def test_motion_forward_composition(rng):
    model = _tiny("motion")
    x = rng.standard_normal((2, 2, 3, 16, 16))
    feats = []
    for t in range(2):
        h = x[:, t] - model.input_mean.reshape(-1, 1, 1)
        for layer in model.trunk:
            h = layer.forward(h)[0]
        feats.append(h)
    merged = bidirectional_run(feats, model.fwd, model.bwd, model.config.merge)
    z = merged
    for layer in model.head:
        z = layer.forward(z)[0]
    z = z - z.max(axis=1, keepdims=True)
    expected = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(model_forward(model, x)[0], expected, atol=1e-12)


def test_trunk_is_shared_across_frames(rng):
    model = _tiny("motion")
    frame_a, frame_b = rng.standard_normal((2, 3, 16, 16))
    x = np.stack([frame_a, frame_b])[None]
    per_frame = []
    for frame in (frame_a, frame_b):
        h = frame[None]
        for layer in model.trunk:
            h = layer.forward(h)[0]
        per_frame.append(h[0])
    h = x.reshape((2, 3, 16, 16))
    for layer in model.trunk:
        h = layer.forward(h)[0]
    np.testing.assert_array_equal(h[0], per_frame[0])
    np.testing.assert_array_equal(h[1], per_frame[1])


def test_palindrome_identical_branches(rng):
    model = _tiny("motion")
    for key in model.fwd.params:
        model.bwd.params[key] = model.fwd.params[key].copy()
    frame = rng.standard_normal((3, 16, 16))
    h = frame[None] - model.input_mean.reshape(-1, 1, 1)
    for layer in model.trunk:
        h = layer.forward(h)[0]
    merged = bidirectional_run([h, h], model.fwd, model.bwd, "concat_channels")
    d = model.fwd.transform.units
    np.testing.assert_array_equal(merged[:, :d], merged[:, d:])


@pytest.mark.parametrize("kind,gates", [("baseline", "conv"), ("motion", "conv"), ("motion", "fc")])
def test_tiny_end_to_end_gradients(rng, kind, gates):
    model = _tiny(kind, gates, seed=3)
    cfg = model.config
    frame = (cfg.input_channels, cfg.input_height, cfg.input_width)
    x = rng.standard_normal((2,) + frame if kind == "baseline" else (2, 2) + frame)
    labels = np.array([0, 2])
    report = grad_check(model, (x, labels))
    assert report.passed(1e-5), report.worst()
    # independent full-tensor check on the smallest tensors
    _, _, grads = loss_and_grads(model, x, labels)
    params = model.named_params()
    for name in [n for n in params if params[n].size <= 40][:6]:
        num = numeric_grad(lambda: loss_and_grads(model, x, labels)[0], params[name])
        assert max_rel_error(grads[name], num) <= 1e-5, name


def test_snapshot_round_trip(tmp_path, rng):
    model = _tiny("motion", dtype=np.float32)
    model.input_mean = np.array([0.1, 0.2, 0.3], dtype=np.float32)
    save_snapshot(model, tmp_path / "snap", seed=11)
    files = {p.name for p in (tmp_path / "snap").iterdir()}
    assert {"conv1.weights.ten", "fwd.i.W.ten", "fwd.o.V.ten", "bwd.f.b.ten", "model.meta",
            "input_mean.ten"} <= files
    meta = read_meta(tmp_path / "snap" / "model.meta")
    assert meta["kind"] == "motion" and meta["seed"] == "11"
    loaded = load_snapshot(tmp_path / "snap")
    assert loaded.config == model.config
    for name, value in model.named_params().items():
        assert loaded.named_params()[name].tobytes() == value.tobytes()
    x = rng.standard_normal((1, 2, 3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(model_forward(model, x)[0], model_forward(loaded, x)[0])


def test_named_params_and_set_param():
    model = _tiny("motion")
    names = list(model.named_params())
    assert names[0] == "conv1.weights" and names[-1] == "fc2.bias"
    assert "fwd.o.V" in names and "bwd.o.V" in names
    with pytest.raises(DimensionError):
        model.set_param("conv1.bias", np.zeros(99))
    with pytest.raises(KeyError):
        model.set_param("nope.bias", np.zeros(1))


@given(h=st.integers(4, 40), depth=st.integers(1, 8), k=st.sampled_from([1, 3, 5]),
       channels=st.integers(1, 6))
def test_conv_gates_cheaper_than_fc(h, depth, k, channels):
    cfg = desk_config(input_height=8 * h, input_width=8 * h, conv_channels=(4, 4, channels),
                      conv_filters=(3, 3, 3), lstm_depth=depth, lstm_filter=k, fc_dim=4)
    counts = gate_param_counts(cfg)
    # same-padded stride-2 conv1 halves 8h, then three 2x2 pools
    th = tw = (((4 * h) // 2) // 2) // 2
    assert counts["conv"] == 2 * closed_form_cell(4, depth, channels, k)
    n = depth * th * tw
    assert counts["fc"] == 2 * closed_form_cell(4, depth, channels, k, hidden=n, in_dim=channels * th * tw)
    if th * tw > k:
        assert counts["conv"] < counts["fc"]


def test_lstm_counterpart_matches_fc_config():
    model = build_motion(desk_config(), allocate=False)
    other = lstm_counterpart(model)
    assert other.fwd.transform.kind == "fc"
    assert other.fwd.transform.hidden_dim == 16 * 4 * 4
    fc_model = build_motion(dataclasses.replace(desk_config(), lstm_gates="fc"), allocate=False)
    assert param_count(other) == param_count(fc_model)
