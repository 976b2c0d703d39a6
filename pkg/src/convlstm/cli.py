"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 data validation or
shape mismatch, 4 training divergence, 5 gradient check failure.

Settings resolve as preset defaults < ``--config`` key=value file < flags, and
every run logs the resolved values.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .errors import ConfigError, DimensionError, FormatError, TrainingError, ValidationError
from .evaluate import MODES, Metrics, argmax, crossval_report, predict_probs
from .models import (KINDS, ModelConfig, build_model, coerce_setting, desk_config, full_config,
                     gate_param_counts, load_snapshot, save_snapshot, tiny_config)
from .train import TrainConfig, gradcheck_suite, grad_check, init_weights, train_loop, GRADCHECK_TOLERANCE

log = logging.getLogger("convlstm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 2, 3, 4, 5

PRESETS = {"full": full_config, "desk": desk_config, "tiny": tiny_config}
DEFAULT_LR = {"baseline": 1e-4, "motion": 1e-3}

# run settings that are neither model nor training fields
DATA_DEFAULTS = {
    "data": "synth",
    "size": 32,
    "instances": 400,
    "frames": 2,
    "test_fraction": 0.25,
    "protocol": "short",
    "gap": 17,
    "n": 2,
    "count": 3,
    "spacing": 10,
    "every_fifth": False,
    "splits": "",
    "split_id": 1,
}
MODEL_KEYS = {f.name: f for f in dataclasses.fields(ModelConfig)}
TRAIN_KEYS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "threads"}


class UsageError(ConfigError):
    pass


class Settings(dict):
    """Resolved settings; ``explicit`` names keys set by a config file or flag."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.explicit = set()


# -- settings ----------------------------------------------------------------

def read_config_file(path):
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _parse_assignments(items):
    values = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def resolve_settings(args, kind):
    """Merge preset defaults, the config file and explicit flags into one flat dict."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    flag_values = {k: v for k, v in vars(args).items() if k in _FLAG_KEYS and v is not None}
    flag_values.update(_parse_assignments(getattr(args, "set", None)))

    preset = flag_values.get("preset", file_values.get("preset", "desk"))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    gates = flag_values.get("lstm_gates", file_values.get("lstm_gates", "conv"))
    base = PRESETS[preset](kind, gates) if preset == "tiny" else PRESETS[preset]()
    defaults = dict(dataclasses.asdict(base))
    defaults.update(dataclasses.asdict(TrainConfig()))
    defaults.pop("threads")
    defaults.update(DATA_DEFAULTS)
    defaults["learning_rate"] = DEFAULT_LR[kind]
    defaults["preset"] = preset

    settings = Settings(defaults)
    for source in (file_values, flag_values):
        for key, value in source.items():
            if key not in defaults:
                raise ConfigError(f"unknown setting {key!r}")
            settings[key] = coerce_setting(key, value, type(defaults[key]))
            settings.explicit.add(key)
    return settings


def adopt_frame_shape(settings, frame):
    """Take the model input shape from the data unless it was set explicitly."""
    for key, extent in zip(("input_channels", "input_height", "input_width"), frame):
        if key not in settings.explicit:
            settings[key] = int(extent)


def split_settings(settings, kind):
    model_values = {k: settings[k] for k in MODEL_KEYS}
    if kind == "motion":
        model_values["sequence_length"] = settings["frames"]
    try:
        model_cfg = ModelConfig(**model_values).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train_cfg = TrainConfig(**{k: settings[k] for k in TRAIN_KEYS}).validate()
    return model_cfg, train_cfg


def echo_settings(settings):
    lines = []
    for key in sorted(settings):
        value = settings[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    for line in lines:
        log.info("config %s", line)
    return "\n".join(lines) + "\n"


# -- datasets ------------------------------------------------------------------

def _instance_of(sample):
    return sample.source_ids[0].rsplit(":", 1)[0] if sample.source_ids else ""


def _manifest_path(location):
    path = Path(location)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.is_file():
        raise ConfigError(f"data path {location} does not exist")
    return path


def _descriptors(settings, records, protocol):
    if protocol == "short":
        return D.make_short_timeframe(records, settings["gap"])
    if protocol == "wide":
        return D.make_wide_viewpoint(records, settings["n"])[0]
    if protocol == "prior":
        return D.make_prior_frame_sequences(records, settings["count"], settings["spacing"])
    if protocol == "frames":
        return [D.SequenceDescriptor(r.label, r.instance_id, (r.frame_index,)) for r in records]
    raise ConfigError(f"unknown protocol {protocol!r}")


def load_dataset(settings, kind, sequences=True):
    """``(train, test)`` samples.  ``sequences=False`` asks for single frames."""
    if settings["data"] == "synth":
        spec = D.SyntheticSpec(image_size=settings["size"], num_instances=settings["instances"],
                               frames_per_instance=settings["frames"],
                               test_fraction=settings["test_fraction"], seed=settings["seed"])
        train, test = D.synth_generate(spec)
        if not sequences:
            train, test = D.frames_as_samples(train), D.frames_as_samples(test)
        return train, test
    path = _manifest_path(settings["data"])
    records = D.load_manifest(path)
    if settings["every_fifth"]:
        records = D.every_fifth(records)
    protocol = settings["protocol"] if sequences else "frames"
    samples = D.materialize(_descriptors(settings, records, protocol), records, root=path.parent)
    if not settings["splits"]:
        return samples, []
    splits = D.load_splits(settings["splits"])
    split = splits.get(settings["split_id"])
    if split is None:
        raise ValidationError(f"split {settings['split_id']} not found in {settings['splits']}")
    return ([s for s in samples if _instance_of(s) in split.train],
            [s for s in samples if _instance_of(s) in split.test])


# -- subcommands ----------------------------------------------------------------

def cmd_sequences(args):
    records = D.load_manifest(_manifest_path(args.manifest))
    if args.every_fifth:
        records = D.every_fifth(records)
    skipped = 0
    if args.protocol == "short":
        descs = D.make_short_timeframe(records, args.gap)
    elif args.protocol == "wide":
        descs, skipped = D.make_wide_viewpoint(records, args.n)
    else:
        descs = D.make_prior_frame_sequences(records, args.count, args.spacing)
    if args.reverse:
        descs = D.reverse_augment(descs)
    D.write_descriptors(args.out, descs)
    print(f"emitted,{len(descs)}")
    print(f"skipped,{skipped}")
    return EXIT_OK


def cmd_synth(args):
    spec = D.SyntheticSpec(image_size=args.size, num_instances=args.instances,
                           frames_per_instance=args.frames, seed=args.seed)
    records = D.write_synthetic(spec, args.out, n_splits=args.splits)
    print(f"frames,{len(records)}")
    print(f"instances,{spec.num_instances}")
    return EXIT_OK


def cmd_train(args):
    kind = args.model
    settings = resolve_settings(args, kind)
    train, test = load_dataset(settings, kind, sequences=(kind == "motion"))
    if not train:
        raise ValidationError("no training samples")
    frame = np.shape(train[0].frames[0])
    adopt_frame_shape(settings, frame)
    model_cfg, train_cfg = split_settings(settings, kind)
    if frame != (model_cfg.input_channels, model_cfg.input_height, model_cfg.input_width):
        raise DimensionError(f"data frames are {frame} but the model expects "
                             f"{(model_cfg.input_channels, model_cfg.input_height, model_cfg.input_width)}")
    config_text = echo_settings(settings)

    dtype = np.float32 if train_cfg.precision == "single" else np.float64
    model = build_model(kind, model_cfg, dtype)
    init_weights(model, train_cfg.init, train_cfg.seed)
    print("epoch,mean_loss,train_acc,val_acc", flush=True)
    state = train_loop(model, train, train_cfg, val_samples=test or None,
                       on_epoch=lambda rec: print(rec.csv(), flush=True))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text)
    (out / "train_log.csv").write_text(state.log_csv())
    save_snapshot(model, out / "snapshot", train_cfg.seed)
    if state.best_params is not None:
        model.load_params(state.best_params)
        save_snapshot(model, out / "best", train_cfg.seed)
    final = state.history[-1]
    if final.val_acc is not None:
        print(f"val_accuracy,{final.val_acc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    gates = args.gates
    if args.model in ("layers", "lstm", "all") or args.preset == "tiny":
        reports = gradcheck_suite(args.model, gates, args.seed)
    else:
        cfg = PRESETS[args.preset](lstm_gates=gates, num_classes=3)
        model = build_model(args.model, cfg, np.float64)
        init_weights(model, "he", args.seed)
        rng = np.random.default_rng(args.seed + 1)
        frame = (cfg.input_channels, cfg.input_height, cfg.input_width)
        shape = (1,) + frame if args.model == "baseline" else (1, cfg.sequence_length) + frame
        reports = {f"model.{args.model}": grad_check(model, (rng.standard_normal(shape), [0]), seed=args.seed)}
    print("check,tensor,max_rel_error,kinks_skipped")
    worst = ("", "", 0.0)
    for check, report in reports.items():
        for tensor, err in report.items():
            print(f"{check},{tensor},{err:.3e},{report.skipped.get(tensor, 0)}")
            if err > worst[2]:
                worst = (check, tensor, err)
    if worst[2] > GRADCHECK_TOLERANCE:
        print(f"FAIL,{worst[0]},{worst[1]},{worst[2]:.3e}")
        return EXIT_GRADCHECK
    print(f"PASS,{worst[0]},{worst[1]},{worst[2]:.3e}")
    return EXIT_OK


def _eval_split(model, settings, mode):
    sequences = not (model.kind == "baseline" and mode == "direct")
    train, test = load_dataset(settings, model.kind, sequences=sequences)
    if settings["data"] != "synth" and not settings["splits"]:
        # without a split file the whole manifest is the evaluation set
        test = train
    if not test:
        raise ValidationError("no test samples to evaluate")
    frame = np.shape(test[0].frames[0])
    cfg = model.config
    if frame != (cfg.input_channels, cfg.input_height, cfg.input_width):
        raise DimensionError(f"data frames are {frame} but the snapshot expects "
                             f"{(cfg.input_channels, cfg.input_height, cfg.input_width)}")
    probs = predict_probs(model, test, mode)
    labels = np.array([s.label for s in test])
    return Metrics.from_predictions(argmax(probs), labels, cfg.num_classes)


def cmd_eval(args):
    if args.mode not in MODES:
        raise UsageError(f"unknown mode {args.mode!r}")
    probe = load_snapshot(args.snapshot.replace("{split}", "1"))
    kind = probe.kind
    if kind == "baseline" and args.mode == "bidi":
        raise UsageError("--mode bidi needs a motion snapshot")
    if kind == "motion" and args.mode.startswith("pool"):
        raise UsageError("pooling modes need a baseline snapshot")
    settings = resolve_settings(args, kind)
    echo_settings(settings)
    if not settings["splits"]:
        m = _eval_split(probe, settings, args.mode)
        print("split_id,accuracy")
        print(f"all,{100.0 * m.accuracy:.2f}")
        print(f"count,{m.count}")
        return EXIT_OK
    splits = D.load_splits(settings["splits"])
    results = []
    for sid in splits:
        model = load_snapshot(args.snapshot.replace("{split}", str(sid)))
        results.append((sid, _eval_split(model, dict(settings, split_id=sid), args.mode)))
    report = crossval_report(results)
    sys.stdout.write(report.table(f"{kind} ({args.mode})") if args.format == "table" else report.csv())
    return EXIT_OK


def cmd_params(args):
    kind = args.model
    settings = resolve_settings(args, kind)
    model_cfg, _ = split_settings(settings, kind)
    echo_settings(settings)
    model = build_model(kind, model_cfg, allocate=False)
    print("layer,params")
    total = 0
    for name, count in model.param_table():
        print(f"{name},{count}")
        total += count
    print(f"total,{total}")
    if kind == "motion":
        counts = gate_param_counts(model_cfg)
        print(f"lstm_conv_gates,{counts['conv']}")
        print(f"lstm_fc_gates,{counts['fc']}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

# flag destinations that map onto settings keys
_FLAG_KEYS = {"preset", "learning_rate", "epochs", "batch_size", "seed", "init", "precision", "data", "size",
              "instances", "frames", "protocol", "gap", "n", "count", "spacing", "every_fifth", "splits",
              "split_id", "lstm_gates"}


def _add_settings_flags(p, training=True):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any setting")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--gates", dest="lstm_gates", choices=("conv", "fc"))
    p.add_argument("--data", help="'synth' or a manifest file/directory")
    p.add_argument("--size", type=int, help="synthetic image size")
    p.add_argument("--instances", type=int, help="synthetic instance count")
    p.add_argument("--frames", type=int, help="frames per sequence")
    p.add_argument("--seed", type=int)
    p.add_argument("--protocol", choices=("short", "wide", "prior"))
    p.add_argument("--gap", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--spacing", type=int)
    p.add_argument("--every-fifth", action="store_true", default=None)
    p.add_argument("--splits", help="split file")
    p.add_argument("--split-id", type=int)
    if training:
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--init", choices=("he", "zero"))
        p.add_argument("--precision", choices=("single", "double"))


def build_parser():
    parser = argparse.ArgumentParser(prog="convlstm", description="Recurrent convolutional video classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at debug level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sequences", help="build sequence descriptors from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", choices=("short", "wide", "prior"), required=True)
    p.add_argument("--gap", type=int, default=17)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--spacing", type=int, default=10)
    p.add_argument("--every-fifth", action="store_true")
    p.add_argument("--reverse", action="store_true", help="add frame-reversed copies")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sequences)

    p = sub.add_parser("synth", help="write the synthetic moving-blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--instances", type=int, default=400)
    p.add_argument("--frames", type=int, default=2)
    p.add_argument("--splits", type=int, default=10, help="number of random instance splits")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a snapshot")
    p.add_argument("--model", choices=KINDS, required=True)
    p.add_argument("--out", default="run")
    _add_settings_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="compare analytic and numerical gradients")
    p.add_argument("--model", choices=KINDS + ("layers", "lstm", "all"), default="all")
    p.add_argument("--gates", choices=("conv", "fc"), default="conv")
    p.add_argument("--preset", choices=("tiny", "desk"), default="tiny")
    p.add_argument("--tiny", dest="preset", action="store_const", const="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="evaluate a snapshot")
    p.add_argument("--snapshot", required=True, help="snapshot directory; '{split}' is replaced by the split id")
    p.add_argument("--mode", default="direct", choices=MODES)
    p.add_argument("--format", default="csv", choices=("csv", "table"))
    _add_settings_flags(p, training=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="print parameter counts")
    p.add_argument("--model", choices=KINDS, required=True)
    _add_settings_flags(p, training=False)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except TrainingError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (ValidationError, DimensionError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
