"""Confusion-matrix metrics, confidence intervals, and report emission.

The confidence interval is the normal-approximation (Wald) half-width

    half_width = theta * sqrt(val * (1 - val) / n)

with theta = 1.96 for a 95% interval. A true Wilson score interval is
provided separately under ``wilson_interval`` for comparison; the Wald
form is the one reported. Sensitivity and specificity are computed for
binary tasks with the caller-designated positive class (by default the
disease-progressed class); a zero denominator yields None rather than 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import RoiStore
from .errors import (
    InsufficientSubjects,
    InvalidConfig,
    InvalidLabel,
    InvalidSampleCount,
)
from .layers import cross_entropy
from .network import Network

DEFAULT_THETA = 1.96


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K]; rows = true class, columns = predicted
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(predictions, labels, class_count: int, class_names=None) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise InvalidConfig("predictions and labels must be equal-length 1-D sequences")
    for arr, what in ((predictions, "prediction"), (labels, "label")):
        bad = (arr < 0) | (arr >= class_count)
        if bad.any():
            raise InvalidLabel(f"{what} index out of range [0, {class_count})")
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    names = tuple(class_names) if class_names else tuple(str(i) for i in range(class_count))
    return ConfusionMatrix(counts, names)


def metrics(cm: ConfusionMatrix, positive_class: int = 0):
    """(accuracy, sensitivity, specificity); the last two need a binary matrix.

    Undefined ratios (zero denominator) come back as None, and for
    non-binary matrices sensitivity/specificity are None outright.
    """
    total = cm.total
    accuracy = None if total == 0 else float(np.trace(cm.counts)) / total
    k = cm.counts.shape[0]
    if k != 2:
        return accuracy, None, None
    if positive_class not in (0, 1):
        raise InvalidConfig(f"positive class must be 0 or 1, got {positive_class}")
    pos, neg = positive_class, 1 - positive_class
    tp = int(cm.counts[pos, pos])
    fn = int(cm.counts[pos, neg])
    tn = int(cm.counts[neg, neg])
    fp = int(cm.counts[neg, pos])
    sensitivity = tp / (tp + fn) if tp + fn > 0 else None
    specificity = tn / (tn + fp) if tn + fp > 0 else None
    return accuracy, sensitivity, specificity


def confidence_interval(val: float, n: int, theta: float = DEFAULT_THETA) -> float:
    """Wald half-width theta * sqrt(val (1 - val) / n)."""
    if n < 1:
        raise InvalidSampleCount(f"sample count must be >= 1, got {n}")
    if not 0.0 <= val <= 1.0:
        raise InvalidConfig(f"metric value must be in [0, 1], got {val}")
    if theta <= 0:
        raise InvalidConfig(f"theta must be positive, got {theta}")
    return theta * math.sqrt(val * (1.0 - val) / n)


def wilson_interval(val: float, n: int, theta: float = DEFAULT_THETA) -> tuple[float, float]:
    """True Wilson score interval (lo, hi); kept distinct from the Wald form."""
    if n < 1:
        raise InvalidSampleCount(f"sample count must be >= 1, got {n}")
    if not 0.0 <= val <= 1.0:
        raise InvalidConfig(f"metric value must be in [0, 1], got {val}")
    z2 = theta * theta
    denom = 1.0 + z2 / n
    center = (val + z2 / (2 * n)) / denom
    half = theta * math.sqrt(val * (1.0 - val) / n + z2 / (4 * n * n)) / denom
    return center - half, center + half


@dataclass
class MetricWithCI:
    value: float
    half_width: float
    n: int
    theta: float = DEFAULT_THETA

    @classmethod
    def of(cls, value: float, n: int, theta: float = DEFAULT_THETA) -> "MetricWithCI":
        return cls(value, confidence_interval(value, n, theta), n, theta)

    def interval(self) -> tuple[float, float]:
        # reported as-is even when it pokes outside [0, 1]
        return self.value - self.half_width, self.value + self.half_width


@dataclass
class EvalReport:
    task: str
    preset: str
    subset: str
    n: int
    confusion: ConfusionMatrix
    accuracy: MetricWithCI
    sensitivity: MetricWithCI | None
    specificity: MetricWithCI | None
    mean_loss: float

    def to_dict(self) -> dict:
        def metric_dict(m):
            if m is None:
                return None
            return {
                "value": m.value,
                "ci": m.half_width,
                "interval": list(m.interval()),
                "n": m.n,
                "theta": m.theta,
            }

        return {
            "task": self.task,
            "preset": self.preset,
            "subset": self.subset,
            "n": self.n,
            "classes": list(self.confusion.class_names),
            "confusion": self.confusion.counts.tolist(),
            "metrics": {
                "accuracy": metric_dict(self.accuracy),
                "sensitivity": metric_dict(self.sensitivity),
                "specificity": metric_dict(self.specificity),
            },
            "mean_loss": self.mean_loss,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def summary_line(self) -> str:
        def fmt(m):
            if m is None:
                return "n/a"
            return f"{m.value:.3f} ±{m.half_width:.3f}"

        return (
            f"{self.task} {self.preset} [{self.subset}, n={self.n}]  "
            f"ACC {fmt(self.accuracy)}  SEN {fmt(self.sensitivity)}  "
            f"SPC {fmt(self.specificity)}"
        )


def predict_class_probs(
    net: Network,
    store: RoiStore,
    subject_ids: list[str],
    chunk: int = 16,
) -> np.ndarray:
    """Infer-mode class probabilities for center-cropped subject ROIs."""
    roi_names = net.spec.input_names
    out = []
    for start in range(0, len(subject_ids), chunk):
        ids = subject_ids[start : start + chunk]
        inputs = {
            name: np.stack([store.center_crop(sid, name) for sid in ids])
            for name in roi_names
        }
        out.append(net.forward_batch(inputs, mode="infer"))
    return np.concatenate(out, axis=0)


def evaluate(
    net: Network,
    store: RoiStore,
    ids_by_class: dict[str, list[str]],
    classes: tuple[str, ...],
    task: str,
    subset: str,
    positive_class: int = 0,
    theta: float = DEFAULT_THETA,
) -> EvalReport:
    """Score a subject subset: argmax predictions, confusion, metrics with CIs."""
    sids: list[str] = []
    labels: list[int] = []
    for ci, c in enumerate(classes):
        for sid in ids_by_class.get(c, []):
            sids.append(sid)
            labels.append(ci)
    if not sids:
        raise InsufficientSubjects(f"subset {subset!r} has no subjects")
    probs = predict_class_probs(net, store, sids)
    preds = probs.argmax(axis=1)  # ties resolve to the lowest class index
    n = len(sids)
    one_hot = np.zeros_like(probs)
    one_hot[np.arange(n), labels] = 1.0
    losses = [cross_entropy(probs[i], one_hot[i])[0] for i in range(n)]
    cm = confusion(preds, labels, len(classes), classes)
    acc, sen, spc = metrics(cm, positive_class)
    return EvalReport(
        task=task,
        preset=net.spec.preset,
        subset=subset,
        n=n,
        confusion=cm,
        accuracy=MetricWithCI.of(acc, n, theta),
        sensitivity=None if sen is None else MetricWithCI.of(sen, n, theta),
        specificity=None if spc is None else MetricWithCI.of(spc, n, theta),
        mean_loss=float(np.mean(losses)),
    )
