"""Pixel-level change detection metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    iou: float
    # names of metrics whose denominator was zero (reported as 0)
    undefined: tuple[str, ...] = field(default_factory=tuple)

    def as_row(self) -> list[float]:
        return [self.precision, self.recall, self.f1, self.iou]


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _as_binary(a, what: str) -> np.ndarray:
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{what} must be binary (values 0/1)")
    return a.astype(bool)


def confusion(pred, label) -> ConfusionCounts:
    p, g = _as_binary(pred, "prediction"), _as_binary(label, "label")
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != label shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def metrics(c: ConfusionCounts) -> Metrics:
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    p = ratio(c.tp, c.tp + c.fp, "precision")
    r = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * p * r, p + r, "f1")
    iou = ratio(c.tp, c.tp + c.fp + c.fn, "iou")
    return Metrics(p, r, f1, iou, tuple(undefined))


def format_report(m: Metrics, c: ConfusionCounts | None = None) -> str:
    lines = ["metric     value", "---------  --------"]
    for name, v in zip(("precision", "recall", "f1", "iou"), m.as_row()):
        lines.append(f"{name:<9}  {v:.6f}")
    if c is not None:
        lines.append(f"pixels     tp={c.tp} fp={c.fp} fn={c.fn} tn={c.tn}")
    if m.undefined:
        lines.append("undefined (zero denominator): " + ", ".join(m.undefined))
    return "\n".join(lines)


def csv_rows(m: Metrics) -> str:
    return "metric,value\n" + "".join(
        f"{n},{v!r}\n" for n, v in zip(("precision", "recall", "f1", "iou"), m.as_row()))
