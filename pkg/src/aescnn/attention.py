"""First-fixation (FFP) and interest-region (AIR) maps from last-block features.

FFP is the most activated channel of the last convolutional block, AIR the
sum over all of its channels; both are upsampled bilinearly to the input
resolution and min-max normalized to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError

SELECTORS = ("mean", "sum", "max")
DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class AttentionMaps:
    ffp: np.ndarray  # (R, R) in [0, 1]
    air: np.ndarray  # (R, R) in [0, 1]
    selected_channel: int
    source_resolution: int
    air_sum: np.ndarray  # (r, r) channel sum before upsampling/normalization
    channel_scores: np.ndarray  # per-channel activation used for selection
    selector: str = "mean"

    def metadata(self) -> dict:
        return {
            "selected_channel": self.selected_channel,
            "selector": self.selector,
            "source_resolution": self.source_resolution,
            "output_resolution": int(self.ffp.shape[0]),
        }


def normalize(m: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def _axis_weights(src: int, dst: int):
    # half-pixel centres, clamped at the borders
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, pos - i0


def upsample_bilinear(m: np.ndarray, size: int) -> np.ndarray:
    """Resize a 2-D map to ``size`` x ``size``.

    Written as ``a + t * (b - a)`` so constant maps stay exactly constant.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {m.shape}")
    i0, i1, t = _axis_weights(m.shape[0], size)
    rows = m[i0] + t[:, None] * (m[i1] - m[i0])
    j0, j1, u = _axis_weights(m.shape[1], size)
    return rows[:, j0] + u[None, :] * (rows[:, j1] - rows[:, j0])


def channel_scores(maps: np.ndarray, selector: str = "mean") -> np.ndarray:
    if selector == "mean":
        return maps.mean(axis=(1, 2))
    if selector == "sum":
        return maps.sum(axis=(1, 2))
    if selector == "max":
        return maps.max(axis=(1, 2))
    raise ValueError(f"selector must be one of {SELECTORS}, got {selector!r}")


def extract(last_conv_maps: np.ndarray, input_resolution: int,
            selector: str = "mean") -> AttentionMaps:
    """Maps for one sample; ``last_conv_maps`` is (C, r, r) or (1, C, r, r).

    The selected channel is the argmax of the per-channel ``selector``
    statistic, lowest index on ties.
    """
    if last_conv_maps is None:
        raise ShapeError("no feature maps supplied")
    maps = np.asarray(last_conv_maps, dtype=np.float64)
    if maps.ndim == 4:
        if maps.shape[0] != 1:
            raise ShapeError("extract takes a single sample")
        maps = maps[0]
    if maps.ndim != 3:
        raise ShapeError(f"expected (C, r, r) feature maps, got shape {maps.shape}")
    scores = channel_scores(maps, selector)
    k = int(np.argmax(scores))
    air_sum = maps.sum(axis=0)
    return AttentionMaps(
        ffp=normalize(upsample_bilinear(maps[k], input_resolution)),
        air=normalize(upsample_bilinear(air_sum, input_resolution)),
        selected_channel=k,
        source_resolution=maps.shape[1],
        air_sum=air_sum,
        channel_scores=scores,
        selector=selector,
    )


# --------------------------------------------------------------------------
# rendering


def colormap(m: np.ndarray) -> np.ndarray:
    """Linear blue -> red ramp: 0 is (0, 0, 255), 1 is (255, 0, 0)."""
    m = np.asarray(m, dtype=np.float64)
    return np.stack([255.0 * m, np.zeros_like(m), 255.0 * (1.0 - m)], axis=-1)


def render_overlay(image: np.ndarray, heat: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Blend the colormapped ``heat`` over an (H, W, 3) uint8 image.

    out = round((1 - alpha) * image + alpha * colormap(heat)), half-up.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if heat.shape != image.shape[:2]:
        raise ShapeError(f"map {heat.shape} does not match image {image.shape[:2]}")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if heat.min() < 0 or heat.max() > 1:
        raise ValueError("map values must lie in [0, 1]")
    blend = (1.0 - alpha) * image.astype(np.float64) + alpha * colormap(heat)
    return np.clip(np.floor(blend + 0.5), 0, 255).astype(np.uint8)


def to_uint8_image(chw: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    return np.clip(np.floor(chw.transpose(1, 2, 0) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png(path, pixels: np.ndarray):
    Image.fromarray(pixels, "RGB").save(Path(path))


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def dump_grid(path, grid: np.ndarray):
    np.savetxt(path, np.atleast_2d(grid), fmt="%.9e")
