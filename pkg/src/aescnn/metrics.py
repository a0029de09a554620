"""Classification metrics over a fixed class set.

Macro averages run over every declared class, including classes that never
occur in truth or predictions; empty denominators give 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_DOWN, Decimal
from typing import Sequence

import numpy as np

from .errors import DataError
from .modelb import MAX_SCORE, MIN_SCORE

SCORE_CLASSES = tuple(range(MIN_SCORE, MAX_SCORE + 1))
BINARY_CLASSES = ("low", "high")
BINARY_THRESHOLD = 5


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class
    classes: tuple

    @classmethod
    def from_labels(cls, truth, predicted, classes: Sequence) -> "ConfusionMatrix":
        truth, predicted = list(truth), list(predicted)
        if len(truth) != len(predicted):
            raise DataError(f"truth has {len(truth)} labels, predictions {len(predicted)}")
        index = {c: i for i, c in enumerate(classes)}
        if len(index) != len(classes):
            raise DataError("class set contains duplicates")
        try:
            t = np.array([index[x] for x in truth], dtype=np.int64)
            p = np.array([index[x] for x in predicted], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"label {exc.args[0]!r} is not in the class set") from None
        k = len(classes)
        counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return cls(counts, tuple(classes))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


@dataclass(frozen=True)
class MetricsReport:
    classes: tuple
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    count: int
    confusion: ConfusionMatrix

    @property
    def ave_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def ave_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def ave_f1(self) -> float:
        return float(self.f1.mean())

    def per_class(self) -> dict:
        return {
            c: {"precision": float(p), "recall": float(r), "f1": float(f)}
            for c, p, r, f in zip(self.classes, self.precision, self.recall, self.f1)
        }

    def to_text(self) -> str:
        lines = [f"{'class':>6}  {'precision':>9}  {'recall':>9}  {'f1':>9}  {'support':>7}"]
        support = self.confusion.counts.sum(axis=1)
        for c, p, r, f, n in zip(self.classes, self.precision, self.recall, self.f1, support):
            lines.append(f"{str(c):>6}  {p:9.4f}  {r:9.4f}  {f:9.4f}  {int(n):7d}")
        lines.append(f"{'macro':>6}  {self.ave_precision:9.4f}  {self.ave_recall:9.4f}  {self.ave_f1:9.4f}  {self.count:7d}")
        lines.append(f"accuracy {self.accuracy:.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        return (
            "accuracy,avePrecision,aveRecall,aveF1\n"
            f"{self.accuracy:.9f},{self.ave_precision:.9f},{self.ave_recall:.9f},{self.ave_f1:.9f}\n"
        )


def evaluate(truth, predicted, classes: Sequence = SCORE_CLASSES) -> MetricsReport:
    cm = ConfusionMatrix.from_labels(truth, predicted, classes)
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    precision = _ratio(tp, counts.sum(axis=0))
    recall = _ratio(tp, counts.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    accuracy = float(tp.sum() / cm.total) if cm.total else 0.0
    return MetricsReport(tuple(classes), precision, recall, f1, accuracy, cm.total, cm)


def macro_f1(truth, predicted, classes: Sequence = SCORE_CLASSES) -> float:
    return evaluate(truth, predicted, classes).ave_f1


def binarize(scores, threshold: int = BINARY_THRESHOLD) -> list[str]:
    """Scores below ``threshold`` are "low", the rest "high"."""
    out = []
    for s in scores:
        if not MIN_SCORE <= int(s) <= MAX_SCORE or int(s) != s:
            raise DataError(f"score {s} outside [{MIN_SCORE}, {MAX_SCORE}]")
        out.append("low" if s < threshold else "high")
    return out


def improvement(candidate: float, baseline: float) -> float:
    """Relative gain in percent, truncated to one decimal.

    Truncation (not half-up rounding) reproduces reported figures such as
    0.253 vs 0.19 -> 33.1.
    """
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    pct = 100.0 * (candidate - baseline) / baseline
    # round away binary noise (e.g. 5.3999999999) before truncating
    exact = Decimal(repr(round(pct, 9)))
    return float(exact.quantize(Decimal("0.1"), rounding=ROUND_DOWN))
