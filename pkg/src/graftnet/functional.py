"""Differentiable neural primitives with hand-written backward rules."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import erf, expit

from .tensor import ShapeError, Tensor, as_tensor, matmul

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._result(xd * cdf, (x,), bw, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), bw, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` applied over the last axis."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = matmul(x, weight.transpose())
    if bias is not None:
        out = out + bias
    return out


def layer_norm(x: Tensor, gain: Tensor | None, bias: Tensor | None, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if gain is not None and gain.shape != (d,):
        raise ShapeError(f"layer_norm gain shape {gain.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = g if gain is None else g * gain.data
        gxhat_mean = gx.mean(axis=-1, keepdims=True)
        proj = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx - gxhat_mean - xhat * proj)
        red = tuple(range(xd.ndim - 1))
        dg = None if gain is None else (g * xhat).sum(axis=red)
        db = None if bias is None else g.sum(axis=red)
        return dx, dg, db

    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = (x, gain if gain is not None else Tensor(0.0), bias if bias is not None else Tensor(0.0))
    return Tensor._result(out, parents, bw, "layer_norm")


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None


def batch_norm(
    x: Tensor,
    state: BatchNormState,
    gain: Tensor | None = None,
    bias: Tensor | None = None,
    training: bool = True,
) -> Tensor:
    """Batch norm over every axis except axis 1 (channels).

    Train mode normalizes with biased batch statistics and folds the unbiased
    variance into the running estimate. Eval mode uses the running estimate and
    raises if no training step has populated it.
    """
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm expects channel axis of size {state.channels}, got {x.shape}")
    red = (0,) + tuple(range(2, x.ndim))
    bshape = (1, state.channels) + (1,) * (x.ndim - 2)
    xd = x.data
    m = xd.size // state.channels

    if training:
        if m < 2:
            raise ShapeError(f"batch_norm in train mode needs >= 2 values per channel, got {m}")
        mu = xd.mean(axis=red, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv
        unbiased = var.reshape(-1) * (m / (m - 1))
        mom = state.momentum
        if state.running_mean is None:
            state.running_mean = np.zeros(state.channels, dtype=xd.dtype)
            state.running_var = np.ones(state.channels, dtype=xd.dtype)
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu.reshape(-1)).astype(xd.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(xd.dtype)

        def dx_rule(gx):
            gm = gx.mean(axis=red, keepdims=True)
            proj = (gx * xhat).mean(axis=red, keepdims=True)
            return inv * (gx - gm - xhat * proj)

    else:
        if state.running_mean is None:
            raise RuntimeError("batch_norm eval mode before any training step: running statistics uninitialized")
        mu = state.running_mean.reshape(bshape).astype(xd.dtype)
        inv = (1.0 / np.sqrt(state.running_var.reshape(bshape) + state.eps)).astype(xd.dtype)
        xhat = (xd - mu) * inv

        def dx_rule(gx):
            return gx * inv

    def bw(g):
        gx = g if gain is None else g * gain.data.reshape(bshape)
        dg = None if gain is None else (g * xhat).sum(axis=red)
        db = None if bias is None else g.sum(axis=red)
        return dx_rule(gx), dg, db

    out = xhat
    if gain is not None:
        out = out * gain.data.reshape(bshape)
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    parents = (x, gain if gain is not None else Tensor(0.0), bias if bias is not None else Tensor(0.0))
    return Tensor._result(out, parents, bw, "batch_norm")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW kernel (square kernels only)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {cin_w}")
    if k != k2:
        raise ShapeError("conv2d supports square kernels only")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xd, wdat = x.data, w.data

    if k == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        # channels-last matmul: (B,Ho,Wo,Cin) @ (Cin,Cout)
        xl = np.ascontiguousarray(xs.transpose(0, 2, 3, 1))
        wm = wdat.reshape(cout, cin)
        out = (xl @ wm.T).transpose(0, 3, 1, 2)

        def bw(g):
            gl = g.transpose(0, 2, 3, 1)
            gw = np.tensordot(gl, xl, axes=([0, 1, 2], [0, 1, 2])).reshape(wdat.shape)
            gxs = (gl @ wm).transpose(0, 3, 1, 2)
            if stride > 1:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = gxs
            else:
                gx = np.ascontiguousarray(gxs)
            gb = None if b is None else g.sum(axis=(0, 2, 3))
            return gx, gw, gb

    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        # (B,Ho,Wo,Cin,k,k) -> rows of the im2col matrix
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * ho * wo, cin * k * k)
        wm = wdat.reshape(cout, cin * k * k)
        out = (cols @ wm.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

        def bw(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, cout)
            gw = (g2.T @ cols).reshape(wdat.shape)
            gcols = (g2 @ wm).reshape(bsz, ho, wo, cin, k, k)
            gxp = np.zeros((bsz, cin, hp, wp), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
            gb = None if b is None else g.sum(axis=(0, 2, 3))
            return np.ascontiguousarray(gx), gw, gb

    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, w, b if b is not None else Tensor(0.0))
    return Tensor._result(out, parents, bw, "conv2d")


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    """Row-stochastic matrix for 1-D linear interpolation, half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m.astype(dtype_str)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of the two trailing axes (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    dt = x.dtype.str
    rh = _interp_matrix(h, out_h, dt)
    rw = _interp_matrix(w, out_w, dt)
    out = np.matmul(rh, np.matmul(x.data, rw.T))

    def bw(g):
        return (np.matmul(rh.T, np.matmul(g, rw)),)

    return Tensor._result(out, (x,), bw, "resize_bilinear")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    bsz, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(bsz, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gg,)

    return Tensor._result(out, (x,), bw, "avg_pool2d")


def max_pool2d(x: Tensor, k: int) -> Tensor:
    bsz, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(bsz, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(bsz, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w)
        return (gb,)

    return Tensor._result(out, (x,), bw, "max_pool2d")


def avg_pool1d_last(x: Tensor, k: int) -> Tensor:
    """Average pooling with kernel = stride = ``k`` over the last axis."""
    n = x.shape[-1]
    if n % k:
        raise ShapeError(f"avg_pool1d: width {n} not divisible by {k}")
    out = x.data.reshape(*x.shape[:-1], n // k, k).mean(axis=-1)
    return Tensor._result(out, (x,), lambda g: (np.repeat(g, k, axis=-1) / k,), "avg_pool1d")


def bce_with_logits(z: Tensor, target, weight=None) -> Tensor:
    """Mean (optionally weighted) binary cross entropy on logits.

    Uses ``max(z,0) - z*t + log1p(exp(-|z|))`` so saturated logits stay finite.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=z.dtype)
    if t.shape != z.shape:
        raise ShapeError(f"bce: logits {z.shape} vs target {t.shape}")
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValueError("bce target values must lie in [0, 1]")
    zd = z.data
    per = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    w = None if weight is None else np.broadcast_to(np.asarray(weight, dtype=z.dtype), z.shape)
    if w is not None:
        per = per * w
    n = zd.size
    val = np.asarray(per.sum() / n, dtype=z.dtype)

    def bw(g):
        d = (expit(zd) - t) / n
        if w is not None:
            d = d * w
        return (g * d,)

    return Tensor._result(val, (z,), bw, "bce")


def broadcast_batch(x: Tensor, batch: int) -> Tensor:
    """Tile a leading size-1 axis to ``batch`` (gradient sums back)."""
    if x.shape[0] == batch:
        return x
    return x + Tensor(np.zeros((batch,) + x.shape[1:], dtype=x.dtype))
