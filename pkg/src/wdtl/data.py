"""Spectrum datasets: synthetic bearing signals, file formats, splits and batching."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp

CLASS_NAMES = ("Normal", "InnerRace", "OuterRace", "Roller")
N_FEATURES = 1000
MAGIC = b"WDTL"
VERSION = 1


class FormatError(ValueError):
    """Malformed dataset or checkpoint file; the message names the offset."""


@dataclass(frozen=True)
class Spectrum:
    bins: np.ndarray
    label: int | None = None
    domain_tag: str = ""


@dataclass
class Dataset:
    features: np.ndarray                 # [N, 1000] float32
    labels: np.ndarray | None = None     # [N] int64 in 0..3
    domain_tag: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or (self.features.shape[0] and
                                       self.features.shape[1] != N_FEATURES):
            if not (self.features.ndim == 2 and self.features.shape[0] == 0):
                raise ValueError(f"features must be [N, {N_FEATURES}], got {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self),):
                raise ValueError("labels must have one entry per sample")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(CLASS_NAMES)):
                raise ValueError("labels must lie in 0..3")

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i) -> Spectrum:
        label = None if self.labels is None else int(self.labels[i])
        return Spectrum(self.features[i], label, self.domain_tag)

    @property
    def samples(self) -> list[Spectrum]:
        return [self[i] for i in range(len(self))]

    @property
    def labeled(self):
        return self.labels is not None

    @property
    def labeled_fraction(self):
        return 1.0 if self.labeled and len(self) else 0.0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, self.domain_tag)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.features, None, self.domain_tag)

    def class_counts(self):
        if self.labels is None:
            return None
        return np.bincount(self.labels, minlength=len(CLASS_NAMES))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.domain_tag == other.domain_tag and same_labels
                and self.features.shape == other.features.shape
                and np.array_equal(self.features.view(np.uint32), other.features.view(np.uint32)))


# ---------------------------------------------------------------- synthesis

@dataclass
class SynthConfig:
    n_per_class: int = 256
    shaft_hz: float = 30.0
    fault_multipliers: dict = field(
        default_factory=lambda: {"inner": 5.4, "outer": 3.6, "roller": 4.7})
    noise_sigma: float = 1.0
    harmonics: int = 8
    sensor_attenuation: float = 1.0
    fault_amplitude: float = 1.0
    modulation_depth: float = 0.5
    speed_jitter: float = 0.01
    domain_tag: str = "source"
    seed: int = 0

    def __post_init__(self):
        if self.shaft_hz <= 0:
            raise ValueError("shaft_hz must be positive")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 < self.sensor_attenuation <= 1:
            raise ValueError("sensor_attenuation must lie in (0, 1]")
        if self.harmonics < 1:
            raise ValueError("harmonics must be >= 1")


_FAULT_KEYS = {1: "inner", 2: "outer", 3: "roller"}


def fault_frequency(cfg: SynthConfig, label: int) -> float:
    return cfg.fault_multipliers[_FAULT_KEYS[label]] * cfg.shaft_hz


def synth_raw(cfg: SynthConfig, label: int, n_samples: int, rng: np.random.Generator):
    """One continuous vibration record for a class, in arbitrary units."""
    fs = dsp.SAMPLE_RATE_HZ
    t = np.arange(n_samples) / fs
    x = rng.normal(0.0, cfg.noise_sigma, size=n_samples) if cfg.noise_sigma > 0 \
        else np.zeros(n_samples)
    if label == 0:
        return x
    # slow random wander of the shaft speed smears peaks the way real motors do
    n_knots = max(2, n_samples // 2000 + 1)
    knots = 1.0 + cfg.speed_jitter * rng.standard_normal(n_knots)
    speed = np.interp(np.linspace(0, n_knots - 1, n_samples), np.arange(n_knots), knots)
    shaft_phase = 2 * np.pi * np.cumsum(cfg.shaft_hz * speed) / fs
    ratio = fault_frequency(cfg, label) / cfg.shaft_hz
    fault = np.zeros(n_samples)
    for m in range(1, cfg.harmonics + 1):
        a_m = cfg.fault_amplitude * (1.0 + 0.2 * rng.standard_normal())
        fault += (a_m / m) * np.sin(m * ratio * shaft_phase + rng.uniform(0, 2 * np.pi))
    envelope = 1.0 + cfg.modulation_depth * np.cos(shaft_phase + rng.uniform(0, 2 * np.pi))
    return x + cfg.sensor_attenuation * envelope * fault


def synth_generate(cfg: SynthConfig, normalize_mode="max") -> Dataset:
    """Four-class spectra: raw records -> segment -> |FFT| -> left half -> normalize."""
    rng = np.random.default_rng(cfg.seed)
    feats, labels = [], []
    for label in range(len(CLASS_NAMES)):
        record = synth_raw(cfg, label, cfg.n_per_class * dsp.SEGMENT_LENGTH, rng)
        segs = dsp.segment(dsp.RawRecord(record), dsp.SEGMENT_LENGTH)
        feats.append(dsp.preprocess(np.stack(segs), normalize_mode))
        labels.append(np.full(len(segs), label))
    return Dataset(np.concatenate(feats), np.concatenate(labels), cfg.domain_tag)


# ---------------------------------------------------------------- persistence

_HEADER = struct.Struct("<4sIIIB")


def save_dataset(ds: Dataset, path, fmt=None):
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "binary")
    if fmt == "csv":
        _save_csv(ds, path)
    elif fmt == "binary":
        _save_binary(ds, path)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(6)
    if head[:4] == MAGIC:
        return _load_binary(path)
    if path.suffix.lower() == ".csv" or head.startswith(b"domain"):
        return _load_csv(path)
    raise FormatError(f"{path}: bad magic {head[:4]!r} at byte 0 (expected {MAGIC!r} or a CSV header)")


def _save_binary(ds: Dataset, path: Path):
    tag = ds.domain_tag.encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, len(ds), N_FEATURES, int(ds.labeled)),
             struct.pack("<H", len(tag)), tag]
    feats = ds.features.astype("<f4")
    if ds.labeled:
        rec = np.empty(len(ds), dtype=[("x", "<f4", (N_FEATURES,)), ("y", "u1")])
        rec["x"], rec["y"] = feats, ds.labels
        parts.append(rec.tobytes())
    else:
        parts.append(feats.tobytes())
    path.write_bytes(b"".join(parts))


def _load_binary(path: Path) -> Dataset:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + 2:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    magic, version, n, width, has_labels = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if width != N_FEATURES:
        raise FormatError(f"{path}: feature length {width} at byte 12, expected {N_FEATURES}")
    if has_labels not in (0, 1):
        raise FormatError(f"{path}: bad label flag {has_labels} at byte 16")
    off = _HEADER.size
    (tag_len,) = struct.unpack_from("<H", raw, off)
    off += 2
    if len(raw) < off + tag_len:
        raise FormatError(f"{path}: truncated domain tag at byte {len(raw)}")
    try:
        tag = raw[off:off + tag_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: domain tag is not UTF-8 at byte {off}") from exc
    off += tag_len
    rec_size = 4 * N_FEATURES + has_labels
    expected = off + n * rec_size
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n} samples, "
                          f"file ends at byte {len(raw)}")
    body = raw[off:]
    if has_labels:
        rec = np.frombuffer(body, dtype=[("x", "<f4", (N_FEATURES,)), ("y", "u1")], count=n)
        labels = rec["y"].astype(np.int64)
        if labels.size and labels.max() >= len(CLASS_NAMES):
            bad = int(np.argmax(labels >= len(CLASS_NAMES)))
            raise FormatError(f"{path}: label {labels[bad]} out of range at byte "
                              f"{off + bad * rec_size + 4 * N_FEATURES}")
        return Dataset(rec["x"].astype(np.float32), labels, tag)
    feats = np.frombuffer(body, dtype="<f4", count=n * N_FEATURES).reshape(n, N_FEATURES)
    return Dataset(feats.astype(np.float32), None, tag)


def _save_csv(ds: Dataset, path: Path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "label"] + [f"f{i}" for i in range(N_FEATURES)])
        for i in range(len(ds)):
            label = "" if ds.labels is None else str(int(ds.labels[i]))
            w.writerow([ds.domain_tag, label] + [f"{v:.9g}" for v in ds.features[i]])


def _load_csv(path: Path) -> Dataset:
    try:
        return _read_csv(path)
    except (csv.Error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not a readable CSV file: {exc}") from exc


def _read_csv(path: Path) -> Dataset:
    feats, labels, tags = [], [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["domain", "label"] \
                or len(header) != N_FEATURES + 2:
            raise FormatError(f"{path}: line 1: expected header domain,label,f0..f{N_FEATURES - 1}")
        for row in reader:
            line = reader.line_num
            if len(row) != N_FEATURES + 2:
                raise FormatError(f"{path}: line {line}: {len(row) - 2} features, "
                                  f"expected {N_FEATURES}")
            tags.add(row[0])
            try:
                feats.append(np.array(row[2:], dtype=np.float32))
                labels.append(None if row[1] == "" else int(row[1]))
            except ValueError as exc:
                raise FormatError(f"{path}: line {line}: {exc}") from exc
    if len(tags) > 1:
        raise FormatError(f"{path}: mixed domain tags {sorted(tags)}")
    if any(lab is None for lab in labels) and any(lab is not None for lab in labels):
        raise FormatError(f"{path}: some rows labeled and some not")
    arr = np.stack(feats) if feats else np.zeros((0, N_FEATURES), np.float32)
    y = None if not labels or labels[0] is None else np.array(labels)
    try:
        return Dataset(arr, y, tags.pop() if tags else "")
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- splitting

def split(ds: Dataset, fraction, seed=0) -> tuple[Dataset, Dataset]:
    """Stratified (when labeled) random split into (fraction, 1 - fraction)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    if ds.labels is None:
        perm = rng.permutation(len(ds))
        cut = int(round(fraction * len(ds)))
        return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))
    a, b = [], []
    for c in range(len(CLASS_NAMES)):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise ValueError(f"class {c} has fewer than 2 samples; cannot stratify")
        idx = rng.permutation(idx)
        cut = min(max(int(round(fraction * idx.size)), 1), idx.size - 1)
        a.append(idx[:cut])
        b.append(idx[cut:])
    return ds.subset(np.sort(np.concatenate(a))), ds.subset(np.sort(np.concatenate(b)))


def label_subset(ds: Dataset, count_per_class, seed=0) -> tuple[Dataset, np.ndarray]:
    """Draw ``count_per_class`` labeled samples per class; returns (subset, indices)."""
    if ds.labels is None:
        raise ValueError("label_subset needs a labeled dataset")
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(len(CLASS_NAMES)):
        idx = np.flatnonzero(ds.labels == c)
        if count_per_class > idx.size:
            raise ValueError(f"class {c} has {idx.size} samples, {count_per_class} requested")
        picked.append(rng.choice(idx, size=count_per_class, replace=False))
    chosen = np.sort(np.concatenate(picked)).astype(np.int64)
    return ds.subset(chosen), chosen


class BatchIterator:
    """Endless shuffled minibatches; the final partial batch of each epoch is dropped."""

    def __init__(self, n_items, batch_size, seed=0):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if n_items < batch_size:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {n_items}")
        self.n_items, self.batch_size = n_items, batch_size
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self.cursor = 0
        self._order = self.rng.permutation(n_items)

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        if self.cursor + self.batch_size > self.n_items:
            self.epoch += 1
            self.cursor = 0
            self._order = self.rng.permutation(self.n_items)
        out = self._order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return out
