"""Accuracy metrics, multi-frame inference strategies and cross-validation summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import model_forward

MODES = ("direct", "bidi", "pool-avg", "pool-max")


@dataclass
class Metrics:
    accuracy: float
    per_class: list
    count: int

    @classmethod
    def from_predictions(cls, predicted, labels, num_classes=None):
        predicted = np.asarray(predicted)
        labels = np.asarray(labels)
        if labels.size == 0:
            raise ValueError("no samples to evaluate")
        if predicted.shape != labels.shape:
            raise ValueError("predictions and labels differ in length")
        k = num_classes if num_classes is not None else int(max(predicted.max(), labels.max())) + 1
        per_class = []
        for c in range(k):
            mask = labels == c
            per_class.append(float(np.mean(predicted[mask] == c)) if mask.any() else float("nan"))
        return cls(float(np.mean(predicted == labels)), per_class, int(labels.size))


def argmax(probs):
    """Row-wise argmax; exact ties go to the lowest class index."""
    return np.asarray(probs).argmax(axis=-1)


def _batched(model, xs, batch_size=64):
    return np.concatenate([model_forward(model, xs[i:i + batch_size])[0]
                           for i in range(0, len(xs), batch_size)])


def _as_sequence(seq):
    frames = seq.frames if hasattr(seq, "frames") else seq
    return np.stack([np.asarray(f) for f in frames])


def direct_inference(model, sequence):
    x = _as_sequence(sequence)
    if model.kind == "baseline":
        if len(x) != 1:
            raise ValueError("direct baseline inference takes single frames; use a pooling mode")
        return model_forward(model, x)[0][0]
    return model_forward(model, x[None])[0][0]


def pooled_baseline_inference(model, sequence, pooling="average"):
    """Single-frame probabilities combined by mean, or by max then renormalized."""
    if model.kind != "baseline":
        raise ValueError("pooled inference needs a single-frame baseline model")
    probs = model_forward(model, _as_sequence(sequence))[0]
    if pooling in ("average", "avg"):
        return probs.mean(axis=0)
    if pooling == "max":
        m = probs.max(axis=0)
        return m / m.sum()
    raise ValueError(f"unknown pooling {pooling!r}")


def bidirectional_test_inference(model, sequence):
    """Average of the outputs for the sequence and its reversal."""
    if model.kind != "motion":
        raise ValueError("bidirectional testing needs a motion model")
    x = _as_sequence(sequence)
    probs = model_forward(model, np.stack([x, x[::-1]]))[0]
    return 0.5 * (probs[0] + probs[1])


def infer(model, sequence, mode="direct"):
    if mode == "direct":
        return direct_inference(model, sequence)
    if mode == "bidi":
        return bidirectional_test_inference(model, sequence)
    if mode == "pool-avg":
        return pooled_baseline_inference(model, sequence, "average")
    if mode == "pool-max":
        return pooled_baseline_inference(model, sequence, "max")
    raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")


def predict_probs(model, samples, mode="direct"):
    """Class distributions for every sample, batched where the mode allows it."""
    if not samples:
        raise ValueError("no samples to evaluate")
    if mode == "direct":
        x = np.stack([_as_sequence(s) for s in samples])
        if model.kind == "baseline":
            if x.shape[1] != 1:
                raise ValueError("direct baseline inference takes single frames; use a pooling mode")
            x = x[:, 0]
        return _batched(model, x)
    return np.stack([infer(model, s, mode) for s in samples])


def evaluate(model, samples, mode="direct"):
    probs = predict_probs(model, samples, mode)
    labels = np.array([s.label for s in samples])
    return Metrics.from_predictions(argmax(probs), labels, model.config.num_classes)


# -- cross-validation ----------------------------------------------------------

@dataclass
class CrossValReport:
    splits: list  # (split_id, Metrics)
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        if len(self.splits) < 2:
            raise ValueError("a cross-validation report needs at least 2 splits")
        accs = [m.accuracy for _, m in self.splits]
        self.mean = 100.0 * float(np.mean(accs))
        self.std = 100.0 * float(np.std(accs, ddof=1))

    def summary(self):
        return f"{self.mean:.2f} ± {self.std:.2f}"

    def csv(self):
        lines = ["split_id,accuracy"]
        lines += [f"{sid},{100.0 * m.accuracy:.2f}" for sid, m in self.splits]
        lines.append("mean,std")
        lines.append(f"{self.mean:.2f},{self.std:.2f}")
        return "\n".join(lines) + "\n"

    def table(self, title="Model"):
        width = max(len(title), 5)
        rule = "-" * (width + 22)
        return "\n".join([rule, f"{'Method':<{width}}  Accuracy & Std. Dev.", rule,
                          f"{title:<{width}}  {self.summary()}", rule]) + "\n"


def crossval_report(per_split_metrics):
    """Build a report from ``{split_id: Metrics}``, ``[(split_id, Metrics)]`` or plain accuracies."""
    if isinstance(per_split_metrics, dict):
        items = list(per_split_metrics.items())
    else:
        items = list(enumerate(per_split_metrics, start=1))
        items = [v if isinstance(v, tuple) else (i, v) for i, v in items]
    splits = []
    for sid, m in items:
        if not isinstance(m, Metrics):
            acc = float(m)
            if not 0 <= acc <= 1 or math.isnan(acc):
                raise ValueError(f"split {sid}: accuracy {acc} outside [0, 1]")
            m = Metrics(acc, [], 0)
        splits.append((sid, m))
    return CrossValReport(splits)
