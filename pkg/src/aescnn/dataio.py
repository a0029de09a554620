"""Datasets of (image, aesthetic score) pairs.

Labels files are comma-separated with a ``path,score`` header; paths are
relative to the images directory and double as entry ids. Scores are integers
2..9. Images are squashed to a square resolution (aspect ratio is not kept)
with bilinear resampling and scaled to [0, 1].
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .modelb import MAX_SCORE, MIN_SCORE, SCORE_OFFSET

log = logging.getLogger(__name__)

SCORES = tuple(range(MIN_SCORE, MAX_SCORE + 1))
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
LABELS_FILENAME = "labels.csv"


@dataclass(frozen=True)
class PreprocessSpec:
    resolution: int
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.resolution not in (192, 227):
            raise ConfigError(f"resolution must be 192 or 227, got {self.resolution}")


@dataclass
class LabeledDataset:
    ids: list[str]
    scores: np.ndarray
    images: np.ndarray | None = None  # (N, 3, R, R) float32 in [0, 1]
    split: str = "all"
    resolution: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.int64)
        if len(self.ids) != len(self.scores):
            raise DataError("ids and scores differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("dataset ids must be unique")
        bad = (self.scores < MIN_SCORE) | (self.scores > MAX_SCORE)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"score {self.scores[i]} for {self.ids[i]} outside [{MIN_SCORE}, {MAX_SCORE}]")
        if self.images is not None and len(self.images) != len(self.ids):
            raise DataError("image count does not match entry count")

    def __len__(self):
        return len(self.ids)

    @property
    def labels(self) -> np.ndarray:
        """Class indices 0..7."""
        return self.scores - SCORE_OFFSET

    @property
    def counts(self) -> dict[int, int]:
        return {s: int(np.count_nonzero(self.scores == s)) for s in SCORES}

    def subset(self, indices, split: str | None = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            ids=[self.ids[i] for i in indices],
            scores=self.scores[indices],
            images=None if self.images is None else self.images[indices],
            split=split or self.split,
            resolution=self.resolution,
            meta=dict(self.meta),
        )

    def without(self, ids) -> "LabeledDataset":
        drop = set(ids)
        keep = [i for i, name in enumerate(self.ids) if name not in drop]
        return self.subset(keep)


def preprocess(image: Image.Image, spec: PreprocessSpec) -> np.ndarray:
    """PIL image -> (3, R, R) float32."""
    img = image.convert("RGB")
    r = spec.resolution
    if img.size != (r, r):
        img = img.resize((r, r), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / np.float32(255.0)
    if spec.mean is not None:
        arr = arr - np.asarray(spec.mean, dtype=np.float32)[:, None, None]
    if spec.std is not None:
        arr = arr / np.asarray(spec.std, dtype=np.float32)[:, None, None]
    return arr


def read_labels(labels_file) -> list[tuple[str, int]]:
    path = Path(labels_file)
    if not path.is_file():
        raise DataError(f"labels file not found: {path}")
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "score"]:
            raise DataError(f"{path}: expected header 'path,score'")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            name, raw = row[0].strip(), row[1].strip()
            try:
                score = int(raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: score {raw!r} is not an integer") from None
            if not MIN_SCORE <= score <= MAX_SCORE:
                raise DataError(f"{path}:{lineno}: score {score} outside [{MIN_SCORE}, {MAX_SCORE}]")
            rows.append((name, score))
    return rows


def load_dataset(images_dir, labels_file, spec: PreprocessSpec) -> LabeledDataset:
    """Read and preprocess every labelled image; entries are sorted by id."""
    images_dir = Path(images_dir)
    rows = sorted(read_labels(labels_file))
    images = np.empty((len(rows), 3, spec.resolution, spec.resolution), dtype=np.float32)
    for i, (name, _) in enumerate(rows):
        images[i] = load_image(images_dir / name, spec)
    log.info("loaded %d images from %s", len(rows), images_dir)
    return LabeledDataset(
        ids=[r[0] for r in rows],
        scores=[r[1] for r in rows],
        images=images,
        resolution=spec.resolution,
    )


def load_image(path, spec: PreprocessSpec) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing image: {path}")
    try:
        with Image.open(path) as img:
            return preprocess(img, spec)
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def list_images(images_dir) -> list[str]:
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise DataError(f"image directory not found: {images_dir}")
    return sorted(p.name for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def write_dataset(data: LabeledDataset, out_dir) -> Path:
    """Write images as PNG plus ``labels.csv``; returns the labels path."""
    if data.images is None:
        raise DataError("dataset has no images to write")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, img in zip(data.ids, data.images):
        pixels = np.clip(np.floor(img.transpose(1, 2, 0) * 255.0 + 0.5), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, "RGB").save(out_dir / name)
    labels = out_dir / LABELS_FILENAME
    with labels.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "score"])
        for name, score in zip(data.ids, data.scores):
            w.writerow([name, int(score)])
    return labels


# --------------------------------------------------------------------------
# splitting


def allocate(total: int, fractions) -> list[int]:
    """Largest-remainder split of ``total`` items; ties go to the earlier slot."""
    quotas = [total * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    rest = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def split(data: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified (train, val, test) split, each sorted by id."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError("split needs three non-negative fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for s in SCORES:
        members = np.flatnonzero(data.scores == s)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        start = 0
        for k, n in enumerate(allocate(members.size, fractions)):
            parts[k].extend(members[start:start + n].tolist())
            start += n
    out = []
    for name, idx in zip(("train", "val", "test"), parts):
        idx = sorted(idx, key=lambda i: data.ids[i])
        out.append(data.subset(idx, split=name))
    return tuple(out)


# --------------------------------------------------------------------------
# synthetic data
#
# A faint bright disc sits in one of the eight outer cells of a 3x3 thirds
# grid; the cell fixes the class. Disc contrast, radius and sub-cell jitter,
# plus the background level, gradient and pixel noise, are nuisance variation.

_CELLS = [(r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1)]
DISC_CONTRAST = (0.04, 0.12)
PIXEL_NOISE = 0.15
BACKGROUND_TILT = 0.05
BACKGROUND_LEVEL = (0.45, 0.55)


def class_counts(count: int, profile: dict[int, float] | None = None) -> dict[int, int]:
    """Per-score counts. Profiled scores get floor(f * count + 0.5); the rest
    share the remainder evenly, extra items going to the lowest scores."""
    profile = dict(profile or {})
    for s, f in profile.items():
        if s not in SCORES or not 0 <= f <= 1:
            raise ConfigError(f"bad imbalance profile entry {s}: {f}")
    fixed = {s: int(np.floor(f * count + 0.5)) for s, f in profile.items()}
    remaining = count - sum(fixed.values())
    free = [s for s in SCORES if s not in fixed]
    if remaining < 0 or (remaining and not free):
        raise ConfigError("imbalance profile does not fit the requested count")
    counts = dict(fixed)
    for i, s in enumerate(free):
        counts[s] = remaining // len(free) + (1 if i < remaining % len(free) else 0)
    return {s: counts[s] for s in SCORES}


def render_composition(cls: int, resolution: int, rng: np.random.Generator) -> np.ndarray:
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float32)
    base = rng.uniform(*BACKGROUND_LEVEL, size=3).astype(np.float32)
    tilt = rng.uniform(-BACKGROUND_TILT, BACKGROUND_TILT, size=2).astype(np.float32)
    bg = base[:, None, None] + (tilt[0] * yy + tilt[1] * xx)[None] / r
    bg = bg + rng.normal(0.0, PIXEL_NOISE, size=(3, r, r)).astype(np.float32)
    row, col = _CELLS[cls]
    cy = (row + 0.5) * r / 3 + rng.uniform(-r / 24, r / 24)
    cx = (col + 0.5) * r / 3 + rng.uniform(-r / 24, r / 24)
    radius = rng.uniform(r / 14, r / 9)
    delta = rng.uniform(*DISC_CONTRAST, size=3).astype(np.float32)
    disc = ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2
    img = np.where(disc[None], bg + delta[:, None, None], bg)
    return np.clip(img, 0.0, 1.0)


def synthesize(count: int, resolution: int, seed: int,
               profile: dict[int, float] | None = None) -> LabeledDataset:
    """Deterministic synthetic dataset whose score is set by disc position.

    Pixels are quantized to 8-bit levels so a write/load round trip is exact.
    """
    if resolution not in (192, 227):
        raise ConfigError(f"resolution must be 192 or 227, got {resolution}")
    if count < 1:
        raise ConfigError("count must be positive")
    counts = class_counts(count, profile)
    rng = np.random.default_rng(seed)
    scores = np.concatenate([np.full(n, s) for s, n in counts.items()]).astype(np.int64)
    scores = rng.permutation(scores)
    images = np.empty((count, 3, resolution, resolution), dtype=np.float32)
    for i, s in enumerate(scores):
        img = render_composition(int(s) - SCORE_OFFSET, resolution, rng)
        images[i] = np.floor(img * 255.0 + 0.5) / np.float32(255.0)
    width = max(4, len(str(count - 1)))
    ids = [f"synth_{i:0{width}d}.png" for i in range(count)]
    return LabeledDataset(ids=ids, scores=scores, images=images, resolution=resolution,
                          meta={"synthetic_seed": seed, "profile": dict(profile or {})})
