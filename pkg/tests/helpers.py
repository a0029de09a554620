"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

SEEDS = (0, 1, 2, 3, 4)
# relative tolerance on the analytic gradient, by storage precision
GRAD_RTOL = {np.float32: 1e-3, np.float64: 1e-6}
FD_STEP = 1e-6


def rel_error(analytic, numeric) -> float:
    """Norm-wise relative error between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def central_diff(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``x``, perturbed in place.

    ``x`` must be float64 so the oracle is not limited by storage precision.
    """
    assert x.dtype == np.float64
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def confusion_oracle(truth, predicted, classes):
    """Plain-loop precision/recall/F1/accuracy, written independently of the package."""
    k = len(classes)
    index = {c: i for i, c in enumerate(classes)}
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(truth, predicted):
        cm[index[t]][index[p]] += 1
    prec, rec, f1 = [], [], []
    for i in range(k):
        tp = cm[i][i]
        col = sum(cm[r][i] for r in range(k))
        row = sum(cm[i])
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    acc = sum(cm[i][i] for i in range(k)) / len(truth)
    return prec, rec, f1, acc


def brute_force_sweep(pa, pb, truth, n_steps=10):
    """Exhaustive grid evaluation with explicit loops; returns [(w1, macro F1)]."""
    classes = list(range(2, 10))
    out = []
    for i in range(n_steps + 1):
        w1 = i / n_steps
        pred = []
        for ra, rb in zip(pa, pb):
            row = [w1 * x + (1 - w1) * y for x, y in zip(ra, rb)]
            best = 0
            for j in range(1, len(row)):
                if row[j] > row[best]:
                    best = j
            pred.append(best + 2)
        _, _, f1, _ = confusion_oracle(truth, pred, classes)
        out.append((w1, sum(f1) / len(f1)))
    return out
