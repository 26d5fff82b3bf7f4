"""Accuracy, confusion matrices, repeated-run statistics and feature export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from .data import CLASS_NAMES, Dataset

N_CLASSES = len(CLASS_NAMES)


@dataclass
class RunReport:
    iterations: list = field(default_factory=list)   # logged iteration numbers
    l_c: list = field(default_factory=list)
    l_wd: list = field(default_factory=list)
    l_grad: list = field(default_factory=list)
    target_accuracy: list = field(default_factory=list)
    initial_accuracy: float | None = None
    best_accuracy: float | None = None
    best_iteration: int | None = None
    final_accuracy: float | None = None
    confusion: list | None = None

    def to_dict(self):
        return _json_safe(asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class AggregateReport:
    accuracies: list
    mean: float
    ci_half_width: float | None     # None when fewer than two runs
    label: str = ""

    def row(self):
        ci = "n/a" if self.ci_half_width is None else f"{100 * self.ci_half_width:.2f}"
        return f"{self.label:<24} {100 * self.mean:6.2f} (+/- {ci})  runs={len(self.accuracies)}"


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def confusion_matrix(labels, predictions, n_classes=N_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    labels, predictions = np.asarray(labels), np.asarray(predictions)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def accuracy_from_confusion(cm) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else float("nan")


def evaluate(model, ds: Dataset):
    """Return (accuracy, confusion matrix) of argmax predictions on a labeled set."""
    if ds.labels is None:
        raise ValueError(f"cannot evaluate on unlabeled dataset {ds.domain_tag!r}")
    cm = confusion_matrix(ds.labels, model.predict(ds.features))
    return accuracy_from_confusion(cm), cm


def aggregate(accuracies, label="") -> AggregateReport:
    """Mean and Student-t 95% half-width, t_{0.975, R-1} * sd / sqrt(R)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("no runs to aggregate")
    mean = float(acc.mean())
    if acc.size < 2:
        return AggregateReport(acc.tolist(), mean, None, label)
    sd = float(acc.std(ddof=1))
    half = float(stats.t.ppf(0.975, acc.size - 1) * sd / math.sqrt(acc.size))
    return AggregateReport(acc.tolist(), mean, half, label)


def repeated_runs(experiment: Callable[[int], float], runs=5, seeds=None,
                  label="") -> AggregateReport:
    """Run ``experiment(seed)`` for each seed; it returns that run's best accuracy."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    seeds = list(range(runs)) if seeds is None else list(seeds)
    return aggregate([experiment(s) for s in seeds], label)


def export_features(model, ds: Dataset, path):
    """CSV of flattened extractor outputs: domain,label,h0..h{D-1}."""
    feats = model.features(ds.features)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "label"] + [f"h{i}" for i in range(feats.shape[1])])
        for i, row in enumerate(feats):
            label = "" if ds.labels is None else str(int(ds.labels[i]))
            w.writerow([ds.domain_tag, label] + [f"{v:.9g}" for v in row])
    return path
