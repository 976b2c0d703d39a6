"""Frame manifests, sequence construction protocols and the synthetic dataset.

Manifest lines are ``path,label,instance_id,frame_index,angle_deg`` with
``angle_deg`` written as ``-`` when unknown.  Sequence protocols work on
frame records and emit :class:`SequenceDescriptor` objects (label, instance
and frame indices); :func:`materialize` turns descriptors into image tensors.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ManifestParseError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrameRecord:
    path: str
    label: int
    instance_id: str
    frame_index: int
    angle_deg: float | None = None

    def to_line(self):
        angle = "-" if self.angle_deg is None else repr(float(self.angle_deg))
        return f"{self.path},{self.label},{self.instance_id},{self.frame_index},{angle}"


@dataclass(frozen=True)
class SequenceDescriptor:
    label: int
    instance_id: str
    frame_indices: tuple

    def reversed(self):
        return SequenceDescriptor(self.label, self.instance_id, tuple(reversed(self.frame_indices)))

    def to_line(self):
        return ",".join([str(self.label), self.instance_id] + [str(i) for i in self.frame_indices])


@dataclass
class SequenceSample:
    frames: list
    label: int
    source_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a sequence needs at least one frame")
        shape = np.shape(self.frames[0])
        if any(np.shape(f) != shape for f in self.frames):
            raise ValueError("all frames of a sequence must share one shape")

    def reversed(self):
        return SequenceSample(list(reversed(self.frames)), self.label, list(reversed(self.source_ids)))


@dataclass(frozen=True)
class SplitManifest:
    split_id: int
    train: frozenset
    test: frozenset

    def __post_init__(self):
        overlap = self.train & self.test
        if overlap:
            raise ValidationError(f"split {self.split_id}: instances in both train and test: {sorted(overlap)[:5]}")


# -- manifests --------------------------------------------------------------

def parse_manifest(lines):
    records = []
    seen = set()
    labels = {}
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise ManifestParseError(line_no, f"expected 5 comma-separated fields, got {len(parts)}")
        path, label, instance_id, frame_index, angle = parts
        try:
            label = int(label)
            frame_index = int(frame_index)
            angle = None if angle == "-" else float(angle)
        except ValueError as exc:
            raise ManifestParseError(line_no, str(exc)) from None
        if label < 0 or frame_index < 0:
            raise ManifestParseError(line_no, "label and frame_index must be nonnegative")
        if angle is not None and not 0 <= angle < 360:
            raise ManifestParseError(line_no, f"angle {angle} outside [0, 360)")
        if not path or not instance_id:
            raise ManifestParseError(line_no, "empty path or instance_id")
        key = (instance_id, frame_index)
        if key in seen:
            raise ValidationError(f"line {line_no}: duplicate frame {frame_index} of instance {instance_id}")
        seen.add(key)
        if labels.setdefault(instance_id, label) != label:
            raise ValidationError(f"line {line_no}: instance {instance_id} has conflicting labels")
        records.append(FrameRecord(path, label, instance_id, frame_index, angle))
    return records


def load_manifest(path):
    with open(path) as fh:
        return parse_manifest(fh)


def write_manifest(path, records):
    Path(path).write_text("".join(r.to_line() + "\n" for r in records))


def by_instance(records):
    """Instances in first-appearance order, each with frames sorted by index."""
    groups = OrderedDict()
    for r in records:
        groups.setdefault(r.instance_id, []).append(r)
    for frames in groups.values():
        frames.sort(key=lambda r: r.frame_index)
    return groups


# -- sequence protocols -------------------------------------------------------

def every_fifth(records):
    return [r for r in records if r.frame_index % 5 == 0]


def make_short_timeframe(records, gap=17):
    """Pair each frame ``t`` with frame ``t - gap``.

    A missing partner is replaced by the nearest frame at or below ``t - gap``,
    or by the instance's earliest frame when none exists, so no frame is dropped.
    """
    if gap < 1:
        raise ConfigError(f"gap must be >= 1, got {gap}")
    out = []
    for instance_id, frames in by_instance(records).items():
        indices = [r.frame_index for r in frames]
        for r in frames:
            target = r.frame_index - gap
            below = [i for i in indices if i <= target]
            partner = below[-1] if below else indices[0]
            out.append(SequenceDescriptor(r.label, instance_id, (partner, r.frame_index)))
    return out


def circular_distance(a, b):
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def make_wide_viewpoint(records, n):
    """Sequences of ``n`` frames spread in viewing angle from each anchor.

    Two-frame sequences pair the anchor with its antipode; longer ones step
    by ``180/n`` degrees. Ties go to the lower frame index.
    Returns ``(descriptors, skipped)`` where ``skipped`` counts anchors of
    instances with fewer than ``n`` frames.
    """
    if n < 2:
        raise ConfigError(f"wide-viewpoint sequences need n >= 2, got {n}")
    step = 180.0 if n == 2 else 180.0 / n
    out = []
    skipped = 0
    for instance_id, frames in by_instance(records).items():
        if any(r.angle_deg is None for r in frames):
            raise ValidationError(f"instance {instance_id}: wide-viewpoint sequences need angles on every frame")
        if len(frames) < n:
            skipped += len(frames)
            continue
        for anchor in frames:
            chosen = []
            for k in range(n):
                target = (anchor.angle_deg + k * step) % 360.0
                best = min(frames, key=lambda r: (circular_distance(r.angle_deg, target), r.frame_index))
                chosen.append(best.frame_index)
            out.append(SequenceDescriptor(anchor.label, instance_id, tuple(chosen)))
    if skipped:
        log.warning("wide viewpoint: skipped %d anchors from instances with fewer than %d frames", skipped, n)
    return out, skipped


def make_prior_frame_sequences(records, count, spacing):
    """``(t - (count-1)*spacing, ..., t - spacing, t)`` for each frame ``t``.

    Members missing from the instance are replaced by frame ``t`` itself.
    """
    if count < 2 or spacing < 1:
        raise ConfigError(f"need count >= 2 and spacing >= 1, got {count}, {spacing}")
    out = []
    for instance_id, frames in by_instance(records).items():
        present = {r.frame_index for r in frames}
        for r in frames:
            t = r.frame_index
            members = [t - k * spacing for k in range(count - 1, -1, -1)]
            out.append(SequenceDescriptor(r.label, instance_id,
                                          tuple(i if i in present else t for i in members)))
    return out


def reverse_augment(samples):
    """Each sample followed by its frame-reversed copy (palindromes are kept twice)."""
    out = []
    for s in samples:
        out.append(s)
        out.append(s.reversed())
    return out


def frames_as_samples(samples):
    """Split sequences into single-frame samples for the baseline."""
    return [SequenceSample([f], s.label, [sid]) for s in samples
            for f, sid in zip(s.frames, s.source_ids or [None] * len(s.frames))]


def write_descriptors(path, descriptors):
    Path(path).write_text("".join(d.to_line() + "\n" for d in descriptors))


def read_descriptors(path):
    out = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 3:
            raise ManifestParseError(line_no, "descriptor needs label, instance_id and frame indices")
        try:
            out.append(SequenceDescriptor(int(parts[0]), parts[1], tuple(int(p) for p in parts[2:])))
        except ValueError as exc:
            raise ManifestParseError(line_no, str(exc)) from None
    return out


# -- splits ---------------------------------------------------------------------

def parse_splits(lines):
    train, test = {}, {}
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3 or parts[2] not in ("train", "test"):
            raise ManifestParseError(line_no, "expected split_id,instance_id,train|test")
        try:
            split_id = int(parts[0])
        except ValueError:
            raise ManifestParseError(line_no, f"bad split id {parts[0]!r}") from None
        if split_id < 1:
            raise ManifestParseError(line_no, "split ids start at 1")
        (train if parts[2] == "train" else test).setdefault(split_id, set()).add(parts[1])
    return {sid: SplitManifest(sid, frozenset(train.get(sid, ())), frozenset(test.get(sid, ())))
            for sid in sorted(set(train) | set(test))}


def load_splits(path):
    with open(path) as fh:
        return parse_splits(fh)


def write_splits(path, splits):
    lines = []
    for split in splits.values():
        lines += [f"{split.split_id},{i},train" for i in sorted(split.train)]
        lines += [f"{split.split_id},{i},test" for i in sorted(split.test)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def random_splits(instance_labels, n_splits=10, test_fraction=0.25, seed=0):
    """Instance-level splits stratified by label; only used for synthetic data."""
    by_label = OrderedDict()
    for inst, label in instance_labels.items():
        by_label.setdefault(label, []).append(inst)
    splits = {}
    for sid in range(1, n_splits + 1):
        rng = np.random.default_rng((seed, sid))
        test = set()
        for label in sorted(by_label):
            members = sorted(by_label[label])
            k = max(1, int(round(test_fraction * len(members))))
            test.update(members[i] for i in rng.permutation(len(members))[:k])
        splits[sid] = SplitManifest(sid, frozenset(set(instance_labels) - test), frozenset(test))
    return splits


# -- images -----------------------------------------------------------------------

def _read_header(data):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pnm(data):
    """Decode binary PGM (P5) or PPM (P6) bytes into a ``(C, H, W)`` float32 tensor in [0, 1]."""
    tokens, offset = _read_header(data)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}; only P5 and P6 are read")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric header field") from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255 is read")
    if width < 1 or height < 1:
        raise FormatError("image has a zero extent")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    raster = data[offset:offset + size]
    if len(raster) < size:
        raise FormatError(f"truncated payload: {len(raster)} of {size} bytes")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return (img.transpose(2, 0, 1).astype(np.float32) / 255.0)


def load_image(path):
    return decode_pnm(Path(path).read_bytes())


def encode_pnm(tensor):
    arr = np.asarray(tensor)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected a (1|3, H, W) tensor, got {arr.shape}")
    c, h, w = arr.shape
    raster = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + raster.tobytes()


def save_image(path, tensor):
    Path(path).write_bytes(encode_pnm(tensor))


def materialize(descriptors, records, root=".", loader=load_image):
    """Load the frames named by ``descriptors``; each image file is read once."""
    lookup = {(r.instance_id, r.frame_index): r for r in records}
    cache = {}
    root = Path(root)
    out = []
    for d in descriptors:
        frames, ids = [], []
        for idx in d.frame_indices:
            rec = lookup.get((d.instance_id, idx))
            if rec is None:
                raise ValidationError(f"descriptor references missing frame {idx} of {d.instance_id}")
            if rec.path not in cache:
                cache[rec.path] = loader(root / rec.path)
            frames.append(cache[rec.path])
            ids.append(f"{d.instance_id}:{idx}")
        out.append(SequenceSample(frames, d.label, ids))
    return out


# -- synthetic moving-blob data ------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Two classes that differ only in the direction a blob orbits the object.

    Class 0 moves the blob clockwise on screen (image y axis points down),
    class 1 counterclockwise, by ``step_deg`` per frame.  The starting angle is
    uniform, so every single frame has the same distribution in both classes.
    """
    image_size: int = 32
    num_classes: int = 2
    num_instances: int = 400
    frames_per_instance: int = 2
    blob_radius: float = 3.0
    orbit_radius: float = 9.0
    step_deg: float = 90.0
    noise: float = 0.03
    test_fraction: float = 0.25
    seed: int = 0

    def validate(self):
        if self.num_classes != 2:
            raise ConfigError("the synthetic dataset has exactly two classes")
        if self.image_size < 8 or self.num_instances < 2 or self.frames_per_instance < 1:
            raise ConfigError("image_size >= 8, num_instances >= 2 and frames_per_instance >= 1 required")
        if self.blob_radius <= 0 or self.orbit_radius <= 0:
            raise ConfigError("blob geometry must be positive")
        if self.orbit_radius + self.blob_radius > self.image_size / 2 - 1:
            raise ConfigError(f"blob orbit {self.orbit_radius}+{self.blob_radius} does not fit a "
                              f"{self.image_size}px image")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")
        return self


def synth_instance(spec, label, rng):
    """Frames and blob angles (degrees) of one synthetic instance."""
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2.0
    background = rng.uniform(0.0, 0.2, size=3)
    colour = rng.uniform(0.25, 0.55, size=3)
    obj_radius = rng.uniform(0.6, 0.9) * (size / 2.0 - 1)
    base = np.where(((xx - c) ** 2 + (yy - c) ** 2 <= obj_radius ** 2)[None], colour[:, None, None],
                    background[:, None, None])
    theta0 = rng.uniform(0.0, 360.0)
    direction = 1.0 if label == 0 else -1.0
    frames, angles = [], []
    for t in range(spec.frames_per_instance):
        angle = (theta0 + direction * t * spec.step_deg) % 360.0
        rad = math.radians(angle)
        bx, by = c + spec.orbit_radius * math.cos(rad), c + spec.orbit_radius * math.sin(rad)
        blob = (xx - bx) ** 2 + (yy - by) ** 2 <= spec.blob_radius ** 2
        img = np.where(blob[None], 1.0, base) + rng.normal(0.0, spec.noise, size=base.shape)
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        angles.append(angle)
    return frames, angles


def synth_instances(spec, seed=None):
    """``(label, frames, angles)`` per instance; labels alternate 0, 1, 0, ..."""
    spec.validate()
    seed = spec.seed if seed is None else seed
    out = []
    for k in range(spec.num_instances):
        label = k % 2
        frames, angles = synth_instance(spec, label, np.random.default_rng((seed, k)))
        out.append((label, frames, angles))
    return out


def synth_generate(spec, seed=None):
    """Deterministic ``(train, test)`` lists of :class:`SequenceSample`, split by instance."""
    seed = spec.seed if seed is None else seed
    instances = synth_instances(spec, seed)
    n_test = max(1, int(round(spec.test_fraction * len(instances))))
    # instance streams are keyed (seed, k); the split uses the bare seed
    test_ids = set(np.random.default_rng(seed).permutation(len(instances))[:n_test].tolist())
    train, test = [], []
    for k, (label, frames, _) in enumerate(instances):
        sample = SequenceSample(frames, label, [f"synth{k}:{t}" for t in range(len(frames))])
        (test if k in test_ids else train).append(sample)
    return train, test


def write_synthetic(spec, directory, seed=None, n_splits=10):
    """Write PPM frames, ``manifest.txt`` and ``splits.txt``; returns the records."""
    seed = spec.seed if seed is None else seed
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    labels = {}
    for k, (label, frames, angles) in enumerate(synth_instances(spec, seed)):
        inst = f"inst{k:04d}"
        labels[inst] = label
        for t, (frame, angle) in enumerate(zip(frames, angles)):
            rel = f"images/{inst}_f{t:03d}.ppm"
            save_image(directory / rel, frame)
            records.append(FrameRecord(rel, label, inst, t, round(angle, 6) % 360.0))
    write_manifest(directory / "manifest.txt", records)
    write_splits(directory / "splits.txt", random_splits(labels, n_splits, spec.test_fraction, seed))
    return records
