import importlib

import pytest

from convlstm import data as D
from convlstm.cli import main
from convlstm.train import GradCheckReport

cli = importlib.import_module("convlstm.cli")

FAST = ["--preset", "tiny", "--size", "32", "--instances", "16", "--epochs", "2", "--batch-size", "4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    return dict(line.split(",", 1) for line in text.splitlines() if line.count(",") >= 1)


def manifest(tmp_path, lines):
    path = tmp_path / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


# -- sequences ----------------------------------------------------------------------

def test_sequences_short(tmp_path, capsys):
    m = manifest(tmp_path, [f"a{i}.ppm,0,a,{i},-" for i in (0, 17, 34)])
    code, out, _ = run(capsys, "sequences", "--manifest", m, "--protocol", "short", "--gap", 17,
                       "--out", tmp_path / "d.txt")
    assert code == 0 and rows(out) == {"emitted": "3", "skipped": "0"}
    assert (tmp_path / "d.txt").read_text().splitlines() == ["0,a,0,0", "0,a,0,17", "0,a,17,34"]


def test_sequences_wide_pairs_antipodes(tmp_path, capsys):
    m = manifest(tmp_path, [f"a{i}.ppm,1,a,{i},{45 * i}" for i in range(8)] + ["b0.ppm,0,b,0,0"])
    code, out, _ = run(capsys, "sequences", "--manifest", m, "--protocol", "wide", "--n", 2,
                       "--out", tmp_path / "d.txt")
    assert code == 0 and rows(out) == {"emitted": "8", "skipped": "1"}
    lines = (tmp_path / "d.txt").read_text().splitlines()
    assert lines == [f"1,a,{i},{(i + 4) % 8}" for i in range(8)]


def test_sequences_prior_with_reverse(tmp_path, capsys):
    m = manifest(tmp_path, [f"a{i}.ppm,2,a,{i},-" for i in (0, 10, 20)])
    code, out, _ = run(capsys, "sequences", "--manifest", m, "--protocol", "prior", "--count", 3,
                       "--spacing", 10, "--reverse", "--out", tmp_path / "d.txt")
    assert code == 0 and rows(out)["emitted"] == "6"
    lines = (tmp_path / "d.txt").read_text().splitlines()
    assert "2,a,0,10,20" in lines and "2,a,20,10,0" in lines and "2,a,0,0,0" in lines


def test_sequences_error_exits(tmp_path, capsys):
    bad = manifest(tmp_path, ["a.ppm,0,a,0"])
    assert run(capsys, "sequences", "--manifest", bad, "--protocol", "short", "--out", tmp_path / "d")[0] == 2
    dup = manifest(tmp_path, ["a.ppm,0,a,0,-", "b.ppm,0,a,0,-"])
    assert run(capsys, "sequences", "--manifest", dup, "--protocol", "short", "--out", tmp_path / "d")[0] == 3
    with pytest.raises(SystemExit) as info:
        main(["sequences", "--manifest", str(dup), "--protocol", "short", "--out", "x", "--bogus"])
    assert info.value.code == 2


# -- train / eval ------------------------------------------------------------------------

def test_train_twice_identical(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, err = run(capsys, "train", "--model", "baseline", "--seed", 7, *FAST, "--out", tmp_path / name)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    assert "val_accuracy," in outs[0]
    for f in ("train_log.csv", "config.txt", "snapshot/fc2.weights.ten", "best/model.meta"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_echoes_config_and_default_lr(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--model", "motion", *FAST, "--out", tmp_path / "m")
    assert code == 0
    assert "config learning_rate=0.001" in err and "config lstm_gates=conv" in err
    config = (tmp_path / "m" / "config.txt").read_text().splitlines()
    assert "learning_rate=0.001" in config and "input_height=32" in config and "sequence_length=2" in config
    log = (tmp_path / "m" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,mean_loss,train_acc,val_acc" and len(log) == 3


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# settings\nepochs = 3\nlearning_rate=0.05\n")
    argv = ["train", "--model", "baseline", "--preset", "tiny", "--instances", "8", "--config", cfg]
    code, _, _ = run(capsys, *argv, "--out", tmp_path / "a")
    assert code == 0
    assert "learning_rate=0.05" in (tmp_path / "a" / "config.txt").read_text().splitlines()
    assert len((tmp_path / "a" / "train_log.csv").read_text().splitlines()) == 4
    code, _, _ = run(capsys, *argv, "--epochs", 1, "--set", "learning_rate=0.2", "--out", tmp_path / "b")
    config = (tmp_path / "b" / "config.txt").read_text().splitlines()
    assert code == 0 and "epochs=1" in config and "learning_rate=0.2" in config


def test_settings_errors(tmp_path, capsys):
    assert run(capsys, "train", "--model", "baseline", "--set", "colour=red")[0] == 2
    assert run(capsys, "train", "--model", "baseline", "--set", "epochs=many")[0] == 2
    code, _, err = run(capsys, "train", "--model", "baseline", "--data", tmp_path / "missing")
    assert code == 2 and "does not exist" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--model", "baseline", *FAST, "--lr", "1e30", "--out", tmp_path / "x")
    assert code == 4 and "diverged" in err


def test_synth_train_eval_with_splits(tmp_path, capsys):
    data = tmp_path / "synth"
    code, out, _ = run(capsys, "synth", "--out", data, "--instances", 12, "--splits", 2, "--seed", 1)
    assert code == 0 and rows(out) == {"frames": "24", "instances": "12"}
    common = ["--data", data, "--splits", data / "splits.txt"]
    for sid in (1, 2):
        code, _, _ = run(capsys, "train", "--model", "motion", "--preset", "tiny", "--epochs", 1,
                         *common, "--split-id", sid, "--out", tmp_path / f"run{sid}")
        assert code == 0
    code, out, _ = run(capsys, "eval", "--snapshot", tmp_path / "run{split}" / "snapshot", *common)
    lines = out.splitlines()
    assert code == 0 and lines[0] == "split_id,accuracy" and lines[3] == "mean,std"
    accs = [float(line.split(",")[1]) for line in lines[1:3]]
    mean, std = (float(v) for v in lines[4].split(","))
    assert mean == pytest.approx(sum(accs) / 2, abs=0.006)
    assert std == pytest.approx(abs(accs[0] - accs[1]) / 2 ** 0.5, abs=0.006)
    code, out, _ = run(capsys, "eval", "--snapshot", tmp_path / "run{split}" / "snapshot", *common,
                       "--format", "table")
    assert code == 0 and " ± " in out


@pytest.fixture(scope="module")
def palindromes(tmp_path_factory):
    """A manifest of single-frame instances; the short protocol turns each into (t, t)."""
    root = tmp_path_factory.mktemp("pal")
    D.write_synthetic(D.SyntheticSpec(num_instances=12, frames_per_instance=1), root, n_splits=2)
    return root


def test_eval_bidi_equals_direct_on_palindromes(tmp_path, capsys, palindromes):
    code, _, _ = run(capsys, "train", "--model", "motion", *FAST, "--out", tmp_path / "m")
    assert code == 0
    results = {}
    for mode in ("direct", "bidi"):
        code, out, _ = run(capsys, "eval", "--snapshot", tmp_path / "m" / "snapshot", "--data", palindromes,
                           "--mode", mode)
        assert code == 0
        results[mode] = rows(out)
    assert results["direct"] == results["bidi"] and results["direct"]["count"] == "12"


def test_eval_pool_avg_equals_direct(tmp_path, capsys, palindromes):
    code, _, _ = run(capsys, "train", "--model", "baseline", *FAST, "--out", tmp_path / "b")
    assert code == 0
    results = {}
    for mode in ("direct", "pool-avg", "pool-max"):
        code, out, _ = run(capsys, "eval", "--snapshot", tmp_path / "b" / "snapshot", "--data", palindromes,
                           "--mode", mode)
        assert code == 0
        results[mode] = rows(out)
    assert results["direct"] == results["pool-avg"] == results["pool-max"]


def test_eval_mode_and_shape_errors(tmp_path, capsys, palindromes):
    run(capsys, "train", "--model", "baseline", *FAST, "--out", tmp_path / "b")
    snap = tmp_path / "b" / "snapshot"
    assert run(capsys, "eval", "--snapshot", snap, "--mode", "bidi")[0] == 2
    code, _, err = run(capsys, "eval", "--snapshot", snap, "--size", 48, "--instances", 8)
    assert code == 3 and "expects" in err
    assert run(capsys, "eval", "--snapshot", tmp_path / "nothing")[0] == 2


# -- gradcheck -----------------------------------------------------------------------------

@pytest.mark.parametrize("model,gates", [("baseline", "conv"), ("motion", "conv"), ("motion", "fc")])
def test_gradcheck_tiny(capsys, model, gates):
    code, out, _ = run(capsys, "gradcheck", "--model", model, "--gates", gates, "--tiny")
    lines = out.splitlines()
    assert code == 0 and lines[0] == "check,tensor,max_rel_error,kinks_skipped" and lines[-1].startswith("PASS")
    assert len(lines) > 3


def test_gradcheck_failure_exit(capsys, monkeypatch):
    def fake(target, gates, seed):
        report = GradCheckReport({"fc.weights": 0.3, "fc.bias": 1e-9})
        report.skipped = {"fc.weights": 0, "fc.bias": 0}
        return {"model.fake": report}

    monkeypatch.setattr(cli, "gradcheck_suite", fake)
    code, out, _ = run(capsys, "gradcheck", "--model", "baseline", "--tiny")
    assert code == 5 and out.splitlines()[-1].startswith("FAIL,model.fake,fc.weights")


# -- params ----------------------------------------------------------------------------------

def test_params_full_head(capsys):
    code, out, _ = run(capsys, "params", "--model", "baseline", "--preset", "full")
    table = rows(out)
    assert code == 0 and table["fc3"] == "208947" and table["total"] == "25609267"


def test_params_conv_gates_below_fc(capsys):
    code, out, _ = run(capsys, "params", "--model", "motion")
    table = rows(out)
    assert code == 0 and int(table["lstm_conv_gates"]) < int(table["lstm_fc_gates"])


def test_params_zero_layers(capsys):
    code = run(capsys, "params", "--model", "baseline", "--set", "conv_channels=", "--set", "conv_filters=",
               "--set", "conv_strides=")[0]
    assert code == 2
