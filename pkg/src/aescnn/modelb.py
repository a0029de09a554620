"""Model B1-B4: three gated convolutional blocks and two dense layers.

Layout per variant (input resolution, CB3 kernel):

    B1: 227, 1x1    B2: 227, 3x3    B3: 192, 1x1    B4: 192, 3x3

CB1 (128 ch) -> maxpool 8 -> CB2 (96 ch) -> maxpool 4 -> CB3 (96 ch)
-> flatten -> fc_1 (36) -> fc_2 (8 classes). Class index i is score i + 2.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import fused, nn
from .errors import ConfigError, FormatError, ShapeError

CLASS_COUNT = 8
SCORE_OFFSET = 2
MIN_SCORE, MAX_SCORE = SCORE_OFFSET, SCORE_OFFSET + CLASS_COUNT - 1

POOL_AFTER_CB1 = 8
POOL_AFTER_CB2 = 4

VARIANTS = {
    # variant: (input resolution, CB3 kernel)
    "B1": (227, 1),
    "B2": (227, 3),
    "B3": (192, 1),
    "B4": (192, 3),
}
REFERENCE_CHANNELS = (128, 96, 96)
REFERENCE_HIDDEN = 36


@dataclass(frozen=True)
class Stage:
    operator: str  # "CB1, conv1x1", ..., "fc_1", "fc_2"
    resolution: tuple[int, int]  # input extent of the stage
    channels: int  # output channels / features


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    input_resolution: int
    cb_kernels: tuple[int, int, int]
    cb_channels: tuple[int, int, int] = REFERENCE_CHANNELS
    fc_hidden: int = REFERENCE_HIDDEN
    class_count: int = CLASS_COUNT
    score_offset: int = SCORE_OFFSET
    pools: tuple[int, int] = (POOL_AFTER_CB1, POOL_AFTER_CB2)

    @classmethod
    def for_variant(cls, variant: str, cb_channels=None, fc_hidden=None) -> "ModelConfig":
        """Reference configuration; ``cb_channels``/``fc_hidden`` shrink widths for tests."""
        if variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {variant!r}; expected one of {sorted(VARIANTS)}")
        resolution, k3 = VARIANTS[variant]
        cfg = cls(
            variant=variant,
            input_resolution=resolution,
            cb_kernels=(1, 1, k3),
            cb_channels=tuple(cb_channels) if cb_channels else REFERENCE_CHANNELS,
            fc_hidden=fc_hidden or REFERENCE_HIDDEN,
        )
        cfg.validate()
        return cfg

    @property
    def is_reference(self) -> bool:
        return self.cb_channels == REFERENCE_CHANNELS and self.fc_hidden == REFERENCE_HIDDEN

    @property
    def resolutions(self) -> tuple[int, int, int]:
        """Spatial extent entering CB1, CB2 and CB3."""
        r1 = self.input_resolution
        r2 = nn.pool_output_extent(r1, self.pools[0], self.pools[0])
        r3 = nn.pool_output_extent(r2, self.pools[1], self.pools[1])
        return r1, r2, r3

    @property
    def last_resolution(self) -> int:
        return self.resolutions[2]

    @property
    def stages(self) -> list[Stage]:
        r = self.resolutions
        rows = [
            Stage(f"CB{i + 1}, conv{k}x{k}", (r[i], r[i]), ch)
            for i, (k, ch) in enumerate(zip(self.cb_kernels, self.cb_channels))
        ]
        rows.append(Stage("fc_1", (r[2], r[2]), self.fc_hidden))
        rows.append(Stage("fc_2", (1, self.fc_hidden), self.class_count))
        return rows

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}")
        resolution, k3 = VARIANTS[self.variant]
        if self.input_resolution != resolution:
            raise ConfigError(
                f"{self.variant} requires input resolution {resolution}, got {self.input_resolution}"
            )
        if tuple(self.cb_kernels) != (1, 1, k3):
            raise ConfigError(f"{self.variant} requires block kernels (1, 1, {k3})")
        if self.class_count != CLASS_COUNT or self.score_offset != SCORE_OFFSET:
            raise ConfigError("class layout is fixed at 8 classes for scores 2..9")
        if tuple(self.pools) != (POOL_AFTER_CB1, POOL_AFTER_CB2):
            raise ConfigError("pooling is fixed at kernel=stride 8 then 4")
        if min(self.cb_channels) < 1 or self.fc_hidden < 1:
            raise ConfigError("channel widths must be positive")

    def to_record(self) -> dict:
        return {
            "variant": self.variant,
            "input_resolution": self.input_resolution,
            "cb_kernels": list(self.cb_kernels),
            "cb_channels": list(self.cb_channels),
            "fc_hidden": self.fc_hidden,
            "class_count": self.class_count,
            "score_offset": self.score_offset,
            "pools": list(self.pools),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ModelConfig":
        try:
            cfg = cls(
                variant=rec["variant"],
                input_resolution=int(rec["input_resolution"]),
                cb_kernels=tuple(rec["cb_kernels"]),
                cb_channels=tuple(rec["cb_channels"]),
                fc_hidden=int(rec["fc_hidden"]),
                class_count=int(rec["class_count"]),
                score_offset=int(rec["score_offset"]),
                pools=tuple(rec["pools"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad model config record: {exc}") from exc
        cfg.validate()
        return cfg


class ForwardArtifacts(NamedTuple):
    logits: np.ndarray  # (N, 8)
    probs: np.ndarray  # (N, 8)
    last_conv_maps: np.ndarray  # (N, C3, r, r), CB3 output before flattening


@dataclass(eq=False)
class Network:
    config: ModelConfig
    convs: list[nn.ConvParams]
    bns: list[nn.BatchNormParams]
    fcs: list[nn.DenseParams]
    training_meta: dict = field(default_factory=dict)
    fused: bool = True

    def parameters(self) -> dict[str, nn.Tensor]:
        params = {}
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            params[f"cb{i}.weight"] = conv.weight
            params[f"cb{i}.bias"] = conv.bias
            params[f"cb{i}.scale"] = bn.scale
            params[f"cb{i}.shift"] = bn.shift
        for i, fc in enumerate(self.fcs, start=1):
            params[f"fc{i}.weight"] = fc.weight
            params[f"fc{i}.bias"] = fc.bias
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.bns, start=1):
            out[f"cb{i}.running_mean"] = bn.running_mean
            out[f"cb{i}.running_var"] = bn.running_var
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    # ------------------------------------------------------------------
    def _check_batch(self, x):
        r = self.config.input_resolution
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != r or x.shape[3] != r:
            raise ShapeError(f"{self.config.variant} expects batches of shape (N, 3, {r}, {r}), got {x.shape}")

    def _run(self, x, mode, keep_cache, trace=None):
        self._check_batch(x)
        caches = []
        new_bns = []
        h = x
        for i in range(3):
            conv, bn = self.convs[i], self.bns[i]
            if trace is not None:
                trace.append((f"CB{i + 1}, conv{conv.kernel}x{conv.kernel}", h.shape))
            if i < 2:
                pool = self.config.pools[i]
                if self.fused:
                    h, cache, state = fused.cb_pool_forward(h, conv, bn, pool, mode)
                    caches.append(("fused", cache))
                else:
                    g, _, gcache, state = nn.gated_block_forward(h, conv, bn, mode)
                    h, pcache = nn.maxpool_forward(g, pool, pool)
                    caches.append(("plain", (gcache, pcache)))
            else:
                h, _, gcache, state = nn.gated_block_forward(h, conv, bn, mode)
                caches.append(("gated", gcache))
            new_bns.append(state)
        maps = h
        flat = maps.reshape(maps.shape[0], -1)
        hidden = nn.fc_forward(flat, self.fcs[0])
        logits = nn.fc_forward(hidden, self.fcs[1])
        if trace is not None:
            trace += [("fc_1", maps.shape), ("fc_2", hidden.shape), ("output", logits.shape)]
        if mode == "train":
            self.bns = new_bns
        artifacts = ForwardArtifacts(logits, nn.softmax(logits), maps)
        if keep_cache:
            return artifacts, (caches, flat, hidden)
        return artifacts

    def forward(self, x: np.ndarray, mode: str = "infer") -> ForwardArtifacts:
        """Run the network. Train mode also advances batchnorm running statistics."""
        return self._run(x, mode, keep_cache=False)

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray, mode: str = "train"):
        """Forward + backward for class indices ``labels``; fills every ``grad`` slot.

        Returns ``(loss, artifacts)``.
        """
        artifacts, (caches, flat, hidden) = self._run(x, mode, keep_cache=True)
        loss, _, dlogits = nn.softmax_cross_entropy(artifacts.logits, labels)
        params = self.parameters()

        dhidden, dw, db = nn.fc_backward(hidden, self.fcs[1], dlogits)
        params["fc2.weight"].grad, params["fc2.bias"].grad = dw, db
        dflat, dw, db = nn.fc_backward(flat, self.fcs[0], dhidden)
        params["fc1.weight"].grad, params["fc1.bias"].grad = dw, db

        dh = dflat.reshape(artifacts.last_conv_maps.shape)
        for i in (2, 1, 0):
            kind, cache = caches[i]
            need_dx = i > 0
            if kind == "fused":
                dh, grads = fused.cb_pool_backward(cache, dh, input_grad=need_dx)
            elif kind == "plain":
                gcache, pcache = cache
                dh, grads = nn.gated_block_backward(gcache, nn.maxpool_backward(pcache, dh))
            else:
                dh, grads = nn.gated_block_backward(cache, dh)
            for key, g in grads.items():
                params[f"cb{i + 1}.{key}"].grad = g
        return loss, artifacts

    def predict_score(self, image: np.ndarray) -> tuple[int, np.ndarray]:
        """Score in 2..9 for one image (3, R, R) or (1, 3, R, R); ties go to the lower score."""
        x = image[None] if image.ndim == 3 else image
        if x.shape[0] != 1:
            raise ShapeError("predict_score takes a single image")
        probs = self.forward(x, "infer").probs[0]
        return int(np.argmax(probs)) + self.config.score_offset, probs


def build(config: ModelConfig, seed: int, dtype=nn.DEFAULT_DTYPE, fused_blocks: bool = True) -> Network:
    """Initialize a network: He-normal weights, zero biases, identity batchnorm."""
    config.validate()
    rng = np.random.default_rng(seed)
    convs, bns = [], []
    in_ch = 3
    for k, ch in zip(config.cb_kernels, config.cb_channels):
        convs.append(nn.ConvParams.init(in_ch, ch, k, rng, dtype))
        bns.append(nn.BatchNormParams.init(ch, dtype))
        in_ch = ch
    r = config.last_resolution
    fcs = [
        nn.DenseParams.init(in_ch * r * r, config.fc_hidden, rng, dtype),
        nn.DenseParams.init(config.fc_hidden, config.class_count, rng, dtype),
    ]
    return Network(config, convs, bns, fcs, training_meta={"init_seed": seed}, fused=fused_blocks)


def layer_shapes(net: Network, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
    """Run a zero batch through the network, recording each stage's input shape."""
    r = net.config.input_resolution
    x = np.zeros((batch, 3, r, r), dtype=net.convs[0].weight.value.dtype)
    rows = []
    net._run(x, "infer", keep_cache=False, trace=rows)
    return rows


# --------------------------------------------------------------------------
# checkpoints
#
#   "AESB" | u32 version | u32 len | config JSON (utf-8, sorted keys)
#   u32 block count | blocks...
#   block: u16 name len | name | u8 ndim | u32 dims... | float32 LE values
#
# Parameters come first in ``Network.parameters()`` order, then running stats.

MAGIC = b"AESB"
VERSION = 1


def save_checkpoint(net: Network) -> bytes:
    record = {"config": net.config.to_record(), "training_meta": net.training_meta}
    header = json.dumps(record, sort_keys=True, separators=(",", ":")).encode()
    blocks = {name: t.value for name, t in net.parameters().items()}
    blocks.update(net.buffers())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint payload")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(data: bytes, fused_blocks: bool = True) -> Network:
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    version, header_len = rd.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        record = json.loads(rd.take(header_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    config = ModelConfig.from_record(record.get("config", {}))
    (count,) = rd.unpack("<I")
    blocks = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode()
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        blocks[name] = np.frombuffer(rd.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if rd.pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")

    net = build(config, seed=0, fused_blocks=fused_blocks)
    for name, t in net.parameters().items():
        arr = blocks.pop(name, None)
        if arr is None or arr.shape != t.shape:
            raise FormatError(f"checkpoint block {name} missing or mis-shaped")
        t.value = arr
    for i, bn in enumerate(net.bns, start=1):
        try:
            mean = blocks.pop(f"cb{i}.running_mean")
            var = blocks.pop(f"cb{i}.running_var")
        except KeyError as exc:
            raise FormatError(f"checkpoint block {exc} missing") from exc
        net.bns[i - 1] = bn.with_running_stats(mean, var)
    if blocks:
        raise FormatError(f"unexpected checkpoint blocks: {sorted(blocks)}")
    net.training_meta = record.get("training_meta", {})
    return net


def copy_network(net: Network) -> Network:
    """Deep copy through the checkpoint format (float32)."""
    clone = load_checkpoint(save_checkpoint(net), fused_blocks=net.fused)
    return clone
