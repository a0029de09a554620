"""Weighted fusion of two models' class-probability tables.

    p_ensemble[s] = w1 * p_a[s] + w2 * p_b[s],   score = argmax_s p_ensemble[s]

with w1 + w2 = 1 and s running over scores 2..9. ``sweep`` scans w1 on a
regular grid and keeps the weight with the best macro F1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .metrics import SCORE_CLASSES, macro_f1
from .modelb import CLASS_COUNT, SCORE_OFFSET

HEADER = ["id"] + [f"p{s}" for s in SCORE_CLASSES]
ROW_TOLERANCE = 1e-6
IMPORT_TOLERANCE = 1e-4


@dataclass(frozen=True)
class ProbabilityTable:
    ids: tuple[str, ...]
    probs: np.ndarray  # (n, 8) float64, column j is score j + 2
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        validate_rows(self.probs, ROW_TOLERANCE)
        if len(self.ids) != len(self.probs):
            raise DataError(f"{len(self.ids)} ids for {len(self.probs)} probability rows")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("probability table ids must be unique")

    def __len__(self):
        return len(self.ids)

    def reindexed(self, ids: Sequence[str]) -> np.ndarray:
        """Rows in the order of ``ids``."""
        pos = {k: i for i, k in enumerate(self.ids)}
        return self.probs[[pos[k] for k in ids]]


def validate_rows(probs: np.ndarray, tolerance: float, first_row: int = 0):
    if probs.ndim != 2 or probs.shape[1] != CLASS_COUNT:
        raise DataError(f"probability rows must have {CLASS_COUNT} columns, got shape {probs.shape}")
    bad = ~np.isfinite(probs).all(axis=1) | (probs < 0).any(axis=1)
    bad |= np.abs(probs.sum(axis=1) - 1.0) > tolerance
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(
            f"row {i + first_row}: probabilities must be non-negative and sum to 1 "
            f"(sum = {probs[i].sum():.9g})"
        )


@dataclass(frozen=True)
class EnsembleWeights:
    w1: float
    w2: float

    def __post_init__(self):
        if not (0 <= self.w1 <= 1 and 0 <= self.w2 <= 1):
            raise ConfigError(f"weights must lie in [0, 1], got ({self.w1}, {self.w2})")
        if abs(self.w1 + self.w2 - 1) > 1e-12:
            raise ConfigError(f"weights must sum to 1, got {self.w1 + self.w2}")

    @classmethod
    def from_w1(cls, w1: float) -> "EnsembleWeights":
        return cls(w1, 1.0 - w1)


def fuse(a: ProbabilityTable, b: ProbabilityTable, w: EnsembleWeights) -> ProbabilityTable:
    """Weighted sum of two tables; rows follow ``a``'s id order."""
    if set(a.ids) != set(b.ids):
        missing = sorted(set(a.ids) ^ set(b.ids))[:5]
        raise DataError(f"probability tables cover different ids (e.g. {missing})")
    pb = b.probs if a.ids == b.ids else b.reindexed(a.ids)
    fused = w.w1 * a.probs + w.w2 * pb
    return ProbabilityTable(a.ids, fused, name=f"{w.w1:g}*{a.name}+{w.w2:g}*{b.name}")


def scores_from_rows(rows: np.ndarray) -> np.ndarray:
    """Argmax score of each (not necessarily normalized) row; ties go to the lowest score."""
    rows = np.atleast_2d(np.asarray(rows))
    if rows.shape[1] != CLASS_COUNT:
        raise DataError(f"rows must have {CLASS_COUNT} columns, got shape {rows.shape}")
    return rows.argmax(axis=1) + SCORE_OFFSET


def predict(table: ProbabilityTable) -> np.ndarray:
    """Argmax score per row; ties resolve to the lowest score."""
    if len(table) == 0:
        raise DataError("cannot predict from an empty table")
    return scores_from_rows(table.probs)


@dataclass(frozen=True)
class SweepResult:
    grid: list[tuple[float, float]]  # (w1, macro F1)
    best: EnsembleWeights
    best_f1: float

    def to_csv(self) -> str:
        lines = ["w1,w2,aveF1"]
        lines += [f"{w1:.4f},{1.0 - w1:.4f},{f1:.9f}" for w1, f1 in self.grid]
        return "\n".join(lines) + "\n"


def weight_grid(step: float) -> list[float]:
    n = round(1.0 / step)
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ConfigError(f"step {step} does not divide 1 evenly")
    return [i / n for i in range(n + 1)]


def _truth_for(ids, truth) -> list[int]:
    if isinstance(truth, Mapping):
        try:
            return [int(truth[i]) for i in ids]
        except KeyError as exc:
            raise DataError(f"no ground truth for id {exc.args[0]!r}") from None
    truth = list(truth)
    if len(truth) != len(ids):
        raise DataError("ground truth length does not match the table")
    return [int(t) for t in truth]


def sweep(a: ProbabilityTable, b: ProbabilityTable, truth, step: float = 0.1) -> SweepResult:
    """Macro F1 of fused predictions for w1 = 0, step, ..., 1 (w2 = 1 - w1).

    ``truth`` is a mapping id -> score or a sequence aligned with ``a.ids``.
    The first (smallest) w1 wins ties.
    """
    labels = _truth_for(a.ids, truth)
    grid = []
    best_i = 0
    for i, w1 in enumerate(weight_grid(step)):
        f1 = macro_f1(labels, predict(fuse(a, b, EnsembleWeights.from_w1(w1))), SCORE_CLASSES)
        grid.append((w1, f1))
        if f1 > grid[best_i][1]:
            best_i = i
    w1, f1 = grid[best_i]
    return SweepResult(grid, EnsembleWeights.from_w1(w1), f1)


# --------------------------------------------------------------------------
# probability files: "id,p2,...,p9" header, one row per image


def export_probabilities(table: ProbabilityTable, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for name, row in zip(table.ids, table.probs):
            w.writerow([name] + [f"{v:.16e}" for v in row])


def import_probabilities(path, name: str | None = None) -> ProbabilityTable:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"probability file not found: {path}")
    ids, rows = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise DataError(f"{path}: expected header {','.join(HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
            try:
                values = [float(v) for v in row[1:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric probability") from None
            arr = np.array(values)
            try:
                validate_rows(arr[None], IMPORT_TOLERANCE)
            except DataError as exc:
                reason = str(exc).split(": ", 1)[1]
                raise DataError(f"{path}: row {lineno - 1} (line {lineno}): {reason}") from None
            ids.append(row[0].strip())
            rows.append(arr)
    probs = np.array(rows).reshape(-1, CLASS_COUNT)
    # rows within the import tolerance are renormalized to satisfy the table invariant
    sums = probs.sum(axis=1, keepdims=True)
    off = np.abs(sums[:, 0] - 1.0) > ROW_TOLERANCE
    if off.any():
        probs[off] = probs[off] / sums[off]
    return ProbabilityTable(ids, probs, name=name or path.stem)
