"""Mini-batch training and repetitive self-revised learning (RSRL).

RSRL repeatedly removes the least likely samples of the over-represented
score classes, warm-starts training on what is left, and keeps the
retrained snapshot with the best validation macro F1.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dataio import LabeledDataset
from .errors import ConfigError, DataError, FormatError, NumericError
from .metrics import SCORE_CLASSES, macro_f1
from .modelb import Network, copy_network, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

# preprocessing is a stand-in choice; recorded with every trained model
PREPROCESSING_NOTE = "stand-in: bilinear squash to the input resolution, pixels scaled to [0, 1]"


def derive_seed(root: int, *path) -> int:
    """Deterministic child seed for a named subsystem."""
    words = [int(root) & 0xFFFFFFFF]
    for p in path:
        if isinstance(p, str):
            words.extend(p.encode())
        else:
            words.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class TrainRun:
    epochs: int = 30
    batch_size: int = 16
    shuffle_seed: int = 0
    learning_rate: float = 0.01
    momentum: float = 0.9
    keep_snapshots: bool = False
    loss_trace: list[float] = field(default_factory=list)
    snapshots: list[bytes] = field(default_factory=list)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


def _require_images(data: LabeledDataset, net: Network):
    if len(data) == 0:
        raise DataError("dataset is empty")
    if data.images is None:
        raise DataError("dataset has no loaded images")
    r = net.config.input_resolution
    if data.images.shape[1:] != (3, r, r):
        raise DataError(f"images are {data.images.shape[1:]}, network expects (3, {r}, {r})")


def train(net: Network, data: LabeledDataset, run: TrainRun) -> tuple[Network, TrainRun]:
    """Train ``net`` in place with momentum SGD; fills ``run.loss_trace``.

    Each epoch visits the data in a permutation drawn from
    ``(shuffle_seed, epoch)``. The optimizer velocity starts at zero.
    """
    _require_images(data, net)
    labels = data.labels
    state = nn.SgdState(run.learning_rate, run.momentum, seed=run.shuffle_seed)
    params = net.parameters()
    n = len(data)
    for epoch in range(run.epochs):
        order = np.random.default_rng([run.shuffle_seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, run.batch_size):
            idx = order[start:start + run.batch_size]
            loss, _ = net.loss_and_grads(data.images[idx], labels[idx])
            nn.sgd_step(params, state)
            total += loss * len(idx)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise NumericError(f"loss diverged at epoch {epoch + 1}")
        run.loss_trace.append(mean_loss)
        if run.keep_snapshots:
            run.snapshots.append(save_checkpoint(net))
        log.info("epoch %d/%d loss %.6f", epoch + 1, run.epochs, mean_loss)
    meta = net.training_meta
    meta["epochs"] = meta.get("epochs", 0) + run.epochs
    meta["optimizer"] = {"name": "sgd", "learning_rate": run.learning_rate,
                         "momentum": run.momentum, "batch_size": run.batch_size}
    meta["shuffle_seed"] = run.shuffle_seed
    meta["preprocessing"] = PREPROCESSING_NOTE
    return net, run


def predict_probs(net: Network, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(net.forward(images[start:start + batch_size], "infer").probs)
    return np.concatenate(out) if out else np.zeros((0, net.config.class_count))


def predict_scores(net: Network, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    probs = predict_probs(net, images, batch_size)
    return probs.argmax(axis=1) + net.config.score_offset


def accuracy(net: Network, data: LabeledDataset) -> float:
    return float(np.mean(predict_scores(net, data.images) == data.scores))


# --------------------------------------------------------------------------
# RSRL


@dataclass(frozen=True)
class RsrlPlan:
    iterations: int = 5
    drop_fraction: float = 0.1
    majority_rule: str = "count > mean class count"
    selection_metric: str = "validation macro F1"

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if not 0 < self.drop_fraction < 1:
            raise ConfigError(f"drop_fraction must lie in (0, 1), got {self.drop_fraction}")


@dataclass(frozen=True)
class DroppedSample:
    id: str
    score: int
    likelihood: float


@dataclass
class RsrlIteration:
    iteration: int
    dropped: list[DroppedSample]
    size_before: int
    size_after: int
    snapshot_id: int
    val_macro_f1: float
    majority_scores: list[int]

    def to_record(self) -> dict:
        return {
            "iteration": self.iteration,
            "majority_scores": self.majority_scores,
            "size_before": self.size_before,
            "size_after": self.size_after,
            "snapshot": self.snapshot_id,
            "val_macro_f1": self.val_macro_f1,
            "dropped": [[d.id, d.score, d.likelihood] for d in self.dropped],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RsrlIteration":
        return cls(
            iteration=int(rec["iteration"]),
            dropped=[DroppedSample(str(i), int(s), float(p)) for i, s, p in rec["dropped"]],
            size_before=int(rec["size_before"]),
            size_after=int(rec["size_after"]),
            snapshot_id=int(rec["snapshot"]),
            val_macro_f1=float(rec["val_macro_f1"]),
            majority_scores=[int(s) for s in rec["majority_scores"]],
        )


@dataclass
class RsrlTrace:
    plan: RsrlPlan
    iterations: list[RsrlIteration] = field(default_factory=list)
    best_snapshot: int | None = None

    def dumps(self) -> str:
        """JSON lines: a header record, one record per iteration, a footer."""
        header = {"kind": "rsrl-trace", "version": 1, **dataclasses.asdict(self.plan)}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(it.to_record(), sort_keys=True) for it in self.iterations]
        lines.append(json.dumps({"best_snapshot": self.best_snapshot}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RsrlTrace":
        try:
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
            header, body, footer = records[0], records[1:-1], records[-1]
            if header.get("kind") != "rsrl-trace":
                raise FormatError("not an RSRL trace")
            plan = RsrlPlan(int(header["iterations"]), float(header["drop_fraction"]),
                            header["majority_rule"], header["selection_metric"])
            return cls(plan, [RsrlIteration.from_record(r) for r in body], footer["best_snapshot"])
        except (IndexError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed RSRL trace: {exc}") from exc


def majority_scores(scores: np.ndarray) -> list[int]:
    """Scores whose count strictly exceeds the mean count of the classes present."""
    present, counts = np.unique(scores, return_counts=True)
    if present.size == 0:
        return []
    mean = counts.mean()
    return [int(s) for s, c in zip(present, counts) if c > mean]


def select_drops(data: LabeledDataset, likelihoods: np.ndarray, drop_fraction: float):
    """Lowest true-class likelihoods within each majority class.

    ``floor(drop_fraction * class_count)`` per class, ties by id ascending.
    """
    majority = majority_scores(data.scores)
    dropped = []
    for s in majority:
        members = np.flatnonzero(data.scores == s)
        k = int(np.floor(drop_fraction * members.size))
        ranked = sorted(members, key=lambda i: (likelihoods[i], data.ids[i]))
        dropped.extend(
            DroppedSample(data.ids[i], s, float(likelihoods[i])) for i in ranked[:k]
        )
    return majority, dropped


def rsrl(initial: Network, train_data: LabeledDataset, val_data: LabeledDataset,
         plan: RsrlPlan, run: TrainRun) -> tuple[Network, RsrlTrace]:
    """Run ``plan.iterations`` rounds of drop-and-retrain; return the best snapshot.

    Retraining continues from the previous round's weights with a fresh
    optimizer. ``run`` supplies the per-round epochs and optimizer settings.
    """
    trace = RsrlTrace(plan)
    if plan.iterations == 0:
        return initial, trace
    if len(val_data) == 0:
        raise DataError("RSRL needs a non-empty validation split")
    if set(val_data.ids) & set(train_data.ids):
        raise DataError("validation and training splits overlap")
    _require_images(train_data, initial)
    _require_images(val_data, initial)

    net = copy_network(initial)
    data = train_data
    snapshots = []
    for t in range(1, plan.iterations + 1):
        probs = predict_probs(net, data.images)
        likelihoods = probs[np.arange(len(data)), data.labels].astype(np.float64)
        majority, dropped = select_drops(data, likelihoods, plan.drop_fraction)
        size_before = len(data)
        data = data.without(d.id for d in dropped)
        round_run = dataclasses.replace(
            run, shuffle_seed=derive_seed(run.shuffle_seed, "rsrl", t),
            loss_trace=[], snapshots=[], keep_snapshots=False,
        )
        net, _ = train(net, data, round_run)
        net.training_meta["rsrl_iteration"] = t
        snapshots.append(save_checkpoint(net))
        f1 = macro_f1(val_data.scores, predict_scores(net, val_data.images), SCORE_CLASSES)
        trace.iterations.append(RsrlIteration(t, dropped, size_before, len(data), t, f1, majority))
        log.info("rsrl %d: dropped %d, size %d, val macro F1 %.4f", t, len(dropped), len(data), f1)

    best = max(range(len(trace.iterations)),
               key=lambda i: (trace.iterations[i].val_macro_f1, -i))
    trace.best_snapshot = trace.iterations[best].snapshot_id
    return load_checkpoint(snapshots[best], fused_blocks=initial.fused), trace
