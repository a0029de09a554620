"""Fused conv1x1 -> batchnorm -> self-gate -> max-pool block.

The first block of the network runs a 1x1 convolution at full input
resolution, which dominates training time when written as separate numpy
passes. This module computes the same function in one pass:

* batch statistics of a 1x1 convolution are an affine function of the input's
  per-channel mean and covariance, so they never need the convolution output;
* with statistics known, the pre-gate activation is affine in the input pixel;
* ``g(b) = b * sigmoid(b)`` decreases then increases, so its maximum over a
  pooling window sits at the window's largest or smallest pre-gate value.
  The kernel tracks those two per window and evaluates the gate twice.

The backward pass exploits the same structure: the pooled gradient is sparse
(one pixel per window), and the dense batchnorm correction terms reduce to
sums over input moments.

Results agree with the unfused composition of ``nn`` operators to rounding.
"""

from __future__ import annotations

from typing import NamedTuple

import numba
import numpy as np

from .errors import DegenerateStatisticsError, ShapeError
from .nn import BatchNormParams, ConvParams, check_finite, pool_output_extent


@numba.njit(cache=True)
def _sig(v):
    if v >= 0:
        return 1.0 / (1.0 + np.exp(-v))
    e = np.exp(v)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _pool_gate_kernel(x, a_t, c, k, out, argidx, bsel):
    n_img, n_in, h, w = x.shape
    n_out = a_t.shape[1]
    ho, wo = out.shape[2], out.shape[3]
    v = np.empty(n_out, dtype=x.dtype)
    bmax = np.empty(n_out, dtype=x.dtype)
    bmin = np.empty(n_out, dtype=x.dtype)
    imax = np.empty(n_out, dtype=np.int64)
    imin = np.empty(n_out, dtype=np.int64)
    for n in range(n_img):
        for i in range(ho):
            for j in range(wo):
                for o in range(n_out):
                    bmax[o] = -np.inf
                    bmin[o] = np.inf
                for di in range(k):
                    r = i * k + di
                    for dj in range(k):
                        s = j * k + dj
                        flat = r * w + s
                        for o in range(n_out):
                            v[o] = c[o]
                        for ci in range(n_in):
                            xv = x[n, ci, r, s]
                            for o in range(n_out):
                                v[o] += a_t[ci, o] * xv
                        for o in range(n_out):
                            hi = v[o] > bmax[o]
                            lo = v[o] < bmin[o]
                            bmax[o] = v[o] if hi else bmax[o]
                            imax[o] = flat if hi else imax[o]
                            bmin[o] = v[o] if lo else bmin[o]
                            imin[o] = flat if lo else imin[o]
                for o in range(n_out):
                    g_hi = bmax[o] * _sig(bmax[o])
                    g_lo = bmin[o] * _sig(bmin[o])
                    if g_hi > g_lo or (g_hi == g_lo and imax[o] <= imin[o]):
                        out[n, o, i, j] = g_hi
                        argidx[n, o, i, j] = imax[o]
                        bsel[n, o, i, j] = bmax[o]
                    else:
                        out[n, o, i, j] = g_lo
                        argidx[n, o, i, j] = imin[o]
                        bsel[n, o, i, j] = bmin[o]


class FusedCache(NamedTuple):
    x: np.ndarray
    conv: ConvParams
    scale: np.ndarray
    mean: np.ndarray  # float64 per output channel
    inv_std: np.ndarray  # float64 per output channel
    sum_x: np.ndarray  # float64 (C,)
    sum_xx: np.ndarray  # float64 (C, C)
    count: int
    argidx: np.ndarray
    bsel: np.ndarray
    mode: str


def _moments(x):
    n, c, h, w = x.shape
    x2 = x.reshape(n, c, h * w).astype(np.float64)
    sum_x = x2.sum(axis=(0, 2))
    sum_xx = np.matmul(x2, x2.transpose(0, 2, 1)).sum(axis=0)
    return sum_x, sum_xx, n * h * w


def cb_pool_forward(x: np.ndarray, conv: ConvParams, bn: BatchNormParams, pool: int,
                    mode: str = "train"):
    """``maxpool(gate(batchnorm(conv1x1(x))), pool, pool)`` in one pass.

    Returns ``(out, cache, bn_state)`` like the unfused operators.
    """
    if conv.kernel != 1:
        raise ShapeError("fused block requires a 1x1 convolution")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != 4 or x.shape[1] != conv.in_channels:
        raise ShapeError(f"fused block expects (N, {conv.in_channels}, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if pool > h or pool > w:
        raise ShapeError(f"pool kernel {pool} larger than input {h}x{w}")
    check_finite(x, "block input")
    x = np.ascontiguousarray(x)
    dtype = x.dtype
    wmat = conv.weight.value[:, :, 0, 0].astype(np.float64)
    bias = conv.bias.value.astype(np.float64)
    sum_x, sum_xx, count = _moments(x)
    if mode == "train":
        if count <= 1:
            raise DegenerateStatisticsError(
                "train-mode batchnorm needs more than one element per channel"
            )
        mu = sum_x / count
        cov = sum_xx / count - np.outer(mu, mu)
        mean = wmat @ mu + bias
        var = np.maximum(np.einsum("oc,cd,od->o", wmat, cov, wmat), 0.0)
        state = bn.updated(mean, var)
    else:
        mean = bn.running_mean.astype(np.float64)
        var = bn.running_var.astype(np.float64)
        state = bn
    inv_std = 1.0 / np.sqrt(var + bn.epsilon)
    scale = bn.scale.value.astype(np.float64)
    shift = bn.shift.value.astype(np.float64)
    a = (scale * inv_std)[:, None] * wmat
    cvec = scale * (bias - mean) * inv_std + shift
    ho, wo = pool_output_extent(h, pool, pool), pool_output_extent(w, pool, pool)
    out = np.empty((n, conv.out_channels, ho, wo), dtype=dtype)
    argidx = np.empty(out.shape, dtype=np.int64)
    bsel = np.empty(out.shape, dtype=dtype)
    _pool_gate_kernel(x, np.ascontiguousarray(a.T.astype(dtype)), cvec.astype(dtype),
                      pool, out, argidx, bsel)
    cache = FusedCache(x, conv, scale, mean, inv_std, sum_x, sum_xx, count, argidx,
                       bsel, mode)
    return out, cache, state


def cb_pool_backward(cache: FusedCache, dout: np.ndarray, input_grad: bool = True):
    """Return ``(dx, grads)``; ``dx`` is None when ``input_grad`` is false."""
    if dout.shape != cache.argidx.shape:
        raise ShapeError(f"upstream gradient shape {dout.shape} != {cache.argidx.shape}")
    x = cache.x
    n, c, h, w = x.shape
    dtype = x.dtype
    wmat = cache.conv.weight.value[:, :, 0, 0].astype(np.float64)
    bias = cache.conv.bias.value.astype(np.float64)
    inv_std, mean = cache.inv_std, cache.mean
    m = cache.count

    b = cache.bsel.astype(np.float64)
    s = 1.0 / (1.0 + np.exp(-b))
    db = dout.astype(np.float64) * (s * (1 + b * (1 - s)))

    # selected input pixels laid out (O, windows, C) so per-channel work is batched matmul
    o_count = cache.conv.out_channels
    xt = x.reshape(n, c, h * w).transpose(0, 2, 1)
    x_sel = xt[np.arange(n)[:, None, None, None], cache.argidx]  # (N, O, P, Q, C)
    x_sel = np.ascontiguousarray(np.moveaxis(x_sel, 1, 0).reshape(o_count, -1, c), dtype=np.float64)
    db_o = np.moveaxis(db, 1, 0).reshape(o_count, -1)
    xhat_o = (np.matmul(x_sel, wmat[:, :, None])[..., 0] + (bias - mean)[:, None]) * inv_std[:, None]

    dscale = (db_o * xhat_o).sum(axis=1)
    dshift = db_o.sum(axis=1)
    dxhat_o = db_o * cache.scale[:, None]
    s1 = dxhat_o.sum(axis=1)
    if cache.mode == "train":
        m1 = s1 / m
        m2 = (dxhat_o * xhat_o).sum(axis=1) / m
    else:
        m1 = np.zeros_like(s1)
        m2 = np.zeros_like(s1)
    centered = bias - mean
    sum_xhat_x = (wmat @ cache.sum_xx + np.outer(centered, cache.sum_x)) * inv_std[:, None]
    sum_xhat = (wmat @ cache.sum_x + m * centered) * inv_std
    dw = inv_std[:, None] * (np.matmul(dxhat_o[:, None, :], x_sel)[:, 0, :]
                             - m1[:, None] * cache.sum_x[None, :]
                             - m2[:, None] * sum_xhat_x)
    dbias = inv_std * (s1 - m * m1 - m2 * sum_xhat)
    grads = {
        "weight": dw[:, :, None, None].astype(dtype),
        "bias": dbias.astype(dtype),
        "scale": dscale.astype(dtype),
        "shift": dshift.astype(dtype),
    }
    if not input_grad:
        return None, grads

    # sparse part: one selected pixel per (image, channel, window)
    sparse = np.zeros((n, o_count, h * w), dtype=np.float64)
    nn_idx = np.arange(n)[:, None, None, None]
    oo_idx = np.arange(o_count)[None, :, None, None]
    dxhat = np.moveaxis((dxhat_o * inv_std[:, None]).reshape((o_count, n) + db.shape[2:]), 0, 1)
    sparse[nn_idx, oo_idx, cache.argidx] = dxhat
    dx = np.matmul(wmat.T, sparse)
    # dense part from the batch-statistics terms: const + q @ x
    q = -(wmat.T * (inv_std ** 2 * m2)) @ wmat
    const = -wmat.T @ (inv_std * (m1 + m2 * inv_std * centered))
    dx += np.matmul(q, x.reshape(n, c, h * w).astype(np.float64)) + const[None, :, None]
    return dx.reshape(x.shape).astype(dtype), grads
