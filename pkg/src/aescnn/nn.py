"""Differentiable operator core: convolution, batch norm, gating, pooling,
fully-connected layers, softmax cross-entropy and SGD.

Every operator is a pair of plain functions over numpy arrays. Forward
functions return the output together with whatever the matching backward
needs (a ``cache``); nothing here keeps hidden state. Arrays keep the dtype
they arrive with, so the same code runs at 32-bit for training and at 64-bit
for gradient checks.

Activations use the (batch, channels, height, width) layout.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateStatisticsError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


@dataclass(eq=False)
class Tensor:
    """A dense array with an optional same-shape gradient slot."""

    value: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is not None:
            self.grad = np.asarray(self.grad)
            if self.grad.shape != self.value.shape:
                raise ShapeError(
                    f"grad shape {self.grad.shape} != value shape {self.value.shape}"
                )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.value).all())


def check_finite(x: np.ndarray, what: str = "input"):
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


def _check_rank4(x: np.ndarray, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (N, C, H, W), got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution


@dataclass(eq=False)
class ConvParams:
    """Stride-1 convolution with a 1x1 or 3x3 kernel and 'same' padding."""

    weight: Tensor  # (out, in, k, k)
    bias: Tensor  # (out,)

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 4 or w[2] != w[3] or w[2] not in (1, 3):
            raise ShapeError(f"conv weight must be (out, in, k, k) with k in {{1, 3}}, got {w}")
        if self.bias.shape != (w[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({w[0]},)")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @classmethod
    def init(cls, in_channels, out_channels, kernel, rng: np.random.Generator,
             dtype=DEFAULT_DTYPE) -> "ConvParams":
        """He-normal weights (std = sqrt(2 / fan_in)) and zero bias."""
        fan_in = in_channels * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel, kernel))
        return cls(Tensor(w.astype(dtype)), Tensor(np.zeros(out_channels, dtype=dtype)))


def conv_output_shape(input_shape, params: ConvParams) -> tuple[int, int, int, int]:
    n, _, h, w = input_shape
    return (n, params.out_channels, h, w)


def _check_conv_input(x, params: ConvParams):
    _check_rank4(x, "conv input")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv expects {params.in_channels} input channels, got {x.shape[1]}"
        )
    if x.shape[2] < params.kernel or x.shape[3] < params.kernel:
        raise ShapeError(f"spatial extent {x.shape[2:]} smaller than kernel {params.kernel}")


def _windows(x, k, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    _check_conv_input(x, params)
    check_finite(x, "conv input")
    w = params.weight.value.astype(x.dtype, copy=False)
    b = params.bias.value.astype(x.dtype, copy=False)
    n, c, h, wd = x.shape
    if params.kernel == 1:
        y = np.matmul(w[:, :, 0, 0], x.reshape(n, c, h * wd)).reshape(n, -1, h, wd)
    else:
        win = _windows(x, params.kernel, params.padding)
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y + b[None, :, None, None])


def conv2d_backward(x: np.ndarray, params: ConvParams, dy: np.ndarray):
    """Return ``(dx, dweight, dbias)`` for ``y = conv2d_forward(x, params)``."""
    _check_conv_input(x, params)
    expected = conv_output_shape(x.shape, params)
    if dy.shape != expected:
        raise ShapeError(f"upstream gradient shape {dy.shape} != forward output {expected}")
    w = params.weight.value.astype(x.dtype, copy=False)
    n, c, h, wd = x.shape
    o = params.out_channels
    db = dy.sum(axis=(0, 2, 3))
    if params.kernel == 1:
        x2 = x.reshape(n, c, h * wd)
        dy2 = dy.reshape(n, o, h * wd)
        dw = np.einsum("nop,ncp->oc", dy2, x2)[:, :, None, None]
        dx = np.matmul(w[:, :, 0, 0].T, dy2).reshape(x.shape)
    else:
        k, p = params.kernel, params.padding
        win = _windows(x, k, p)
        dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
        dwin = _windows(dy, k, k - 1 - p)
        wflip = w[:, :, ::-1, ::-1]
        dx = np.tensordot(dwin, wflip, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), dw.astype(x.dtype, copy=False), db


# --------------------------------------------------------------------------
# batch normalization


@dataclass(eq=False)
class BatchNormParams:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    @classmethod
    def init(cls, channels, dtype=DEFAULT_DTYPE, epsilon=BN_EPSILON,
             momentum=BN_MOMENTUM) -> "BatchNormParams":
        return cls(
            scale=Tensor(np.ones(channels, dtype=dtype)),
            shift=Tensor(np.zeros(channels, dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
            momentum=momentum,
        )

    def with_running_stats(self, mean, var) -> "BatchNormParams":
        """Copy sharing scale/shift tensors but carrying new running statistics."""
        return dataclasses.replace(self, running_mean=mean, running_var=var)

    def updated(self, batch_mean, batch_var) -> "BatchNormParams":
        m = self.momentum
        dtype = self.running_mean.dtype
        mean = ((1 - m) * self.running_mean + m * batch_mean).astype(dtype)
        var = ((1 - m) * self.running_var + m * batch_var).astype(dtype)
        return self.with_running_stats(mean, var)


class BatchNormCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray
    scale: np.ndarray
    mode: str


def _check_mode(mode):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def batchnorm_forward(x: np.ndarray, bn: BatchNormParams, mode: str = "train"):
    """Per-channel normalization followed by the learned affine map.

    Returns ``(out, cache, state)``. ``state`` is ``bn`` with updated running
    statistics in train mode and ``bn`` itself in infer mode. Batch variance
    is the biased (population) estimate, used both for normalizing and for the
    running average.
    """
    _check_mode(mode)
    _check_rank4(x, "batchnorm input")
    if x.shape[1] != bn.channels:
        raise ShapeError(f"batchnorm expects {bn.channels} channels, got {x.shape[1]}")
    dtype = x.dtype
    scale = bn.scale.value.astype(dtype, copy=False)
    shift = bn.shift.value.astype(dtype, copy=False)
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m <= 1:
            raise DegenerateStatisticsError(
                "train-mode batchnorm needs more than one element per channel"
            )
        # 64-bit statistics: a constant channel must normalize to exactly zero
        mean64 = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var64 = x.var(axis=(0, 2, 3), dtype=np.float64)
        state = bn.updated(mean64, var64)
        mean, var = mean64.astype(dtype), var64.astype(dtype)
    else:
        mean = bn.running_mean.astype(dtype, copy=False)
        var = bn.running_var.astype(dtype, copy=False)
        state = bn
    inv_std = (1.0 / np.sqrt(var + bn.epsilon)).astype(dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * scale[None, :, None, None] + shift[None, :, None, None]
    return out, BatchNormCache(xhat, inv_std, scale, mode), state


def batchnorm_backward(cache: BatchNormCache, dout: np.ndarray):
    """Return ``(dx, dscale, dshift)``."""
    if dout.shape != cache.xhat.shape:
        raise ShapeError(f"upstream gradient shape {dout.shape} != {cache.xhat.shape}")
    xhat = cache.xhat
    dshift = dout.sum(axis=(0, 2, 3))
    dscale = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * cache.scale[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]
    if cache.mode == "infer":
        return dxhat * inv_std, dscale, dshift
    mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dscale, dshift


# --------------------------------------------------------------------------
# gating


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def gate_forward(b: np.ndarray) -> np.ndarray:
    """Self-gate ``b * sigmoid(b)``."""
    return b * sigmoid(b)


def gate_backward(b: np.ndarray, dout: np.ndarray) -> np.ndarray:
    s = sigmoid(b)
    return dout * (s * (1 + b * (1 - s)))


class GatedBlockCache(NamedTuple):
    x: np.ndarray
    conv: ConvParams
    bn_cache: BatchNormCache
    pre_gate: np.ndarray


def gated_block_forward(x: np.ndarray, conv: ConvParams, bn: BatchNormParams,
                        mode: str = "train"):
    """conv -> batchnorm -> multiply by its own sigmoid.

    Returns ``(out, pre_gate, cache, bn_state)`` where ``pre_gate`` is the
    batchnorm output.
    """
    y = conv2d_forward(x, conv)
    pre_gate, bn_cache, bn_state = batchnorm_forward(y, bn, mode)
    out = gate_forward(pre_gate)
    return out, pre_gate, GatedBlockCache(x, conv, bn_cache, pre_gate), bn_state


def gated_block_backward(cache: GatedBlockCache, dout: np.ndarray):
    """Return ``(dx, grads)`` with grads keyed weight/bias/scale/shift."""
    dpre = gate_backward(cache.pre_gate, dout)
    dy, dscale, dshift = batchnorm_backward(cache.bn_cache, dpre)
    dx, dw, db = conv2d_backward(cache.x, cache.conv, dy)
    return dx, {"weight": dw, "bias": db, "scale": dscale, "shift": dshift}


# --------------------------------------------------------------------------
# pooling


def pool_output_extent(extent: int, kernel: int, stride: int) -> int:
    return (extent - kernel) // stride + 1


class PoolCache(NamedTuple):
    input_shape: tuple
    kernel: int
    argmax: np.ndarray  # flat index within each window


def maxpool_forward(x: np.ndarray, kernel: int, stride: int):
    """Non-overlapping valid max pooling; returns ``(out, cache)``.

    Trailing rows/columns that do not fill a whole window are dropped. Ties
    resolve to the first maximum in row-major order.
    """
    _check_rank4(x, "pool input")
    if kernel != stride:
        raise ShapeError(f"only non-overlapping pooling is supported (kernel {kernel} != stride {stride})")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"pool kernel {kernel} larger than input {h}x{w}")
    ho, wo = pool_output_extent(h, kernel, stride), pool_output_extent(w, kernel, stride)
    blocks = x[:, :, : ho * kernel, : wo * kernel].reshape(n, c, ho, kernel, wo, kernel)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, PoolCache(x.shape, kernel, idx)


def maxpool_backward(cache: PoolCache, dout: np.ndarray) -> np.ndarray:
    n, c, h, w = cache.input_shape
    k = cache.kernel
    ho, wo = cache.argmax.shape[2:]
    if dout.shape != (n, c, ho, wo):
        raise ShapeError(f"upstream gradient shape {dout.shape} != {(n, c, ho, wo)}")
    blocks = np.zeros((n, c, ho, wo, k * k), dtype=dout.dtype)
    np.put_along_axis(blocks, cache.argmax[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(cache.input_shape, dtype=dout.dtype)
    dx[:, :, : ho * k, : wo * k] = blocks.reshape(n, c, ho * k, wo * k)
    return dx


# --------------------------------------------------------------------------
# fully connected


@dataclass(eq=False)
class DenseParams:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    def __post_init__(self):
        if len(self.weight.shape) != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"dense weight/bias shapes {self.weight.shape}/{self.bias.shape} are inconsistent"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_features, out_features, rng: np.random.Generator,
             dtype=DEFAULT_DTYPE) -> "DenseParams":
        w = rng.normal(0.0, np.sqrt(2.0 / in_features), (out_features, in_features))
        return cls(Tensor(w.astype(dtype)), Tensor(np.zeros(out_features, dtype=dtype)))


def fc_forward(x: np.ndarray, params: DenseParams) -> np.ndarray:
    """Affine map on (batch, features) rows."""
    if x.ndim != 2 or x.shape[1] != params.in_features:
        raise ShapeError(
            f"fully connected layer expects (batch, {params.in_features}), got {x.shape}"
        )
    w = params.weight.value.astype(x.dtype, copy=False)
    return x @ w.T + params.bias.value.astype(x.dtype, copy=False)


def fc_backward(x: np.ndarray, params: DenseParams, dy: np.ndarray):
    """Return ``(dx, dweight, dbias)``."""
    if dy.shape != (x.shape[0], params.out_features):
        raise ShapeError(f"upstream gradient shape {dy.shape} != {(x.shape[0], params.out_features)}")
    w = params.weight.value.astype(x.dtype, copy=False)
    return dy @ w, dy.T @ x, dy.sum(axis=0)


# --------------------------------------------------------------------------
# loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probs, dlogits)``. ``dlogits`` is the gradient of the
    batch-mean loss, i.e. ``(probs - onehot) / batch``; for a single sample
    that is exactly ``probs - onehot``.
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    check_finite(logits, "logits")
    # 64-bit so near-certain predictions still give a non-zero loss
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1
    dtype = logits.dtype if np.issubdtype(logits.dtype, np.floating) else np.float64
    return loss, probs.astype(dtype), (dlogits / n).astype(dtype)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    learning_rate: float = 0.01
    momentum_coef: float = 0.9
    seed: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum_coef < 1:
            raise ValueError("momentum_coef must lie in [0, 1)")


def sgd_step(params: Mapping[str, Tensor], state: SgdState):
    """Heavy-ball update using each tensor's ``grad`` slot, in place.

    velocity <- momentum * velocity + grad; value <- value - lr * velocity
    """
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.value.shape:
            raise ShapeError(f"gradient shape for {name} does not match parameter")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.value)
        elif v.shape != p.value.shape:
            raise ShapeError(f"velocity shape for {name} does not match parameter")
        v = state.momentum_coef * v + p.grad.astype(p.value.dtype, copy=False)
        state.velocity[name] = v
        p.value = p.value - state.learning_rate * v
