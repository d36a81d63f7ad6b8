"""Cross grafting: fuse a CNN feature map and a transformer feature map into
grafted features ``z`` (for the decoder) and a cross-transposed attention map
``ctam`` (for the attention loss).

Token layout is ``(B, N, d)`` with ``N = g*g`` tokens in row-major grid order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import ConfigError, ModelConfig
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor, concat


@dataclass
class GraftPack:
    r_raw: Tensor
    s_raw: Tensor
    r_tokens: Tensor
    s_tokens: Tensor
    q: Tensor
    k: Tensor
    v: Tensor
    attn: Tensor
    x: Tensor
    y: Tensor
    z: Tensor
    ctam: Tensor


class TokenOperator(Module):
    """conv1x1 -> BN -> GELU -> flatten, after resampling to the graft grid."""

    def __init__(self, c_in: int, d: int, grid: int, rng, dtype=None):
        self.grid = grid
        self.conv = Conv2d(c_in, d, 1, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(d, dtype=dtype)

    def forward(self, feat: Tensor) -> Tensor:
        g = self.grid
        x = F.resize_bilinear(feat, g, g)
        x = F.gelu(self.bn(self.conv(x)))
        b, d = x.shape[:2]
        return x.reshape(b, d, g * g).transpose(0, 2, 1)


class QKV(Module):
    def __init__(self, d: int, rng, dtype=None):
        self.wq = Linear(d, d, rng, dtype=dtype)
        self.wk = Linear(d, d, rng, dtype=dtype)
        self.wv = Linear(d, d, rng, dtype=dtype)

    def forward(self, tokens: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.wq(tokens), self.wk(tokens), self.wv(tokens)


def project_qkv(tokens: Tensor, qkv: QKV) -> tuple[Tensor, Tensor, Tensor]:
    return qkv(tokens)


def fuse_qkv(r_qkv, s_qkv) -> tuple[Tensor, Tensor, Tensor]:
    out = []
    for a, b in zip(r_qkv, s_qkv):
        if a.shape != b.shape:
            raise ShapeError(f"fuse_qkv: shapes {a.shape} and {b.shape} differ")
        out.append(a + b)
    return tuple(out)


def grafted_attention(q: Tensor, k: Tensor, v: Tensor, alpha: float) -> tuple[Tensor, Tensor]:
    """Single-head attention over all tokens. Returns ``(x, attn)`` with
    ``attn = softmax(q k^T / alpha)`` row-stochastic and ``x = attn @ v``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    logits = (q @ k.transpose(-1, -2)) * (1.0 / alpha)
    if not np.all(np.isfinite(logits.data)):
        worst = np.nanmax(np.abs(np.where(np.isfinite(logits.data), logits.data, np.inf)))
        raise FloatingPointError(f"non-finite attention logits (max |logit| = {worst})")
    attn = F.softmax(logits, axis=-1)
    return attn @ v, attn


def symmetrize(attn: Tensor) -> Tensor:
    return attn + attn.transpose(-1, -2)


class CrossGraftingModule(Module):
    def __init__(self, cfg: ModelConfig, c_cnn: int, c_trans: int, rng: np.random.Generator, dtype=None):
        d = cfg.d_graft
        if d <= 0 or d % 2:
            raise ConfigError(f"d_graft must be a positive even integer, got {d}")
        self.cfg = cfg
        self.grid = g = cfg.resolved_graft_grid()
        self.alpha = cfg.attn_scale
        self.r_op = TokenOperator(c_cnn, d, g, rng, dtype)
        self.s_op = TokenOperator(c_trans, d, g, rng, dtype)
        self.r_norm = LayerNorm(d, dtype=dtype)
        self.s_norm = LayerNorm(d, dtype=dtype)
        self.r_qkv = QKV(d, rng, dtype)
        self.s_qkv = None if cfg.shared_qkv else QKV(d, rng, dtype)
        self.out_proj = Linear(d, d, rng, dtype=dtype)
        self.skip_proj = Linear(d, d, rng, dtype=dtype)
        self.out_conv = Conv2d(d, d, 3, rng, dtype=dtype)
        self.ctam_conv = Conv2d(1, 1, 3, rng, dtype=dtype)
        self.ctam_bn = BatchNorm2d(1, dtype=dtype)

    def prepare_tokens(self, r_feat: Tensor, s_feat: Tensor):
        """Returns ``(r_raw, s_raw, r_tokens, s_tokens)``: operator output before and after layer norm."""
        r_raw = self.r_op(r_feat)
        s_raw = self.s_op(s_feat)
        return r_raw, s_raw, self.r_norm(r_raw), self.s_norm(s_raw)

    def graft_output(self, x: Tensor, r_raw: Tensor, s_raw: Tensor) -> tuple[Tensor, Tensor]:
        b, n, d = x.shape
        g = self.grid
        if n != g * g:
            raise ShapeError(f"graft_output: {n} tokens do not fill a {g}x{g} grid")
        # pool over channel pairs of the concatenation, then project back to d
        skip = self.skip_proj(F.avg_pool1d_last(concat([r_raw, s_raw], axis=2), 2))
        y = self.out_proj(x) + skip
        y_grid = y.transpose(0, 2, 1).reshape(b, d, g, g)
        z = y_grid + self.out_conv(y_grid)
        return y, z

    def ctam(self, attn: Tensor) -> Tensor:
        b, n, _ = attn.shape
        s = symmetrize(attn).reshape(b, 1, n, n)
        return F.gelu(self.ctam_bn(self.ctam_conv(s)))

    def forward(self, r_feat: Tensor, s_feat: Tensor) -> GraftPack:
        r_raw, s_raw, r_tok, s_tok = self.prepare_tokens(r_feat, s_feat)
        s_qkv = self.r_qkv if self.s_qkv is None else self.s_qkv
        q, k, v = fuse_qkv(project_qkv(r_tok, self.r_qkv), project_qkv(s_tok, s_qkv))
        x, attn = grafted_attention(q, k, v, self.alpha)
        y, z = self.graft_output(x, r_raw, s_raw)
        return GraftPack(r_raw, s_raw, r_tok, s_tok, q, k, v, attn, x, y, z, self.ctam(attn))
