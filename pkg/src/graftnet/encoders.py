"""CNN and windowed-attention transformer encoders.

Stage shape laws (B = batch):

* CNN stage i in 2..5: ``B x c0*2**(i-1) x H/2**i x W/2**i``
* transformer stage i in 1..3: ``B x e0*2**i x G/2**(i-1) x G/2**(i-1)`` with
  ``G = Ht/patch``; stage 4 is a grid-preserving 2x2 merge of stage 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .config import ConfigError, ModelConfig
from .nn import BatchNorm2d, Conv2d, ConvBNGelu, LayerNorm, Linear, Module, Parameter
from .tensor import Tensor, concat, get_default_dtype


@dataclass
class FeaturePyramid:
    cnn: dict[int, Tensor] = field(default_factory=dict)
    trans: dict[int, Tensor] = field(default_factory=dict)

    def shapes(self) -> dict[str, tuple]:
        out = {f"cnn{i}": t.shape for i, t in sorted(self.cnn.items())}
        out.update({f"trans{i}": t.shape for i, t in sorted(self.trans.items())})
        return out


class BasicBlock(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng, dtype=None):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, rng, stride=stride, bias=False, dtype=dtype)
            self.proj_bn = BatchNorm2d(c_out, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = F.gelu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return F.gelu(out + skip)


class CNNEncoder(Module):
    """Residual CNN keeping stages 2..5; a stride-2 3x3 stem stands in for the 7x7 stage."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=None):
        h, w = cfg.cnn_input_hw
        if h % 32 or w % 32:
            raise ConfigError(f"cnn_input_hw {cfg.cnn_input_hw} must be multiples of 32")
        self.cfg = cfg
        c0 = cfg.cnn_channel_base
        self.stem = ConvBNGelu(3, c0, 3, rng, stride=2, dtype=dtype)
        stages = []
        prev = c0
        for i in (2, 3, 4, 5):
            c = cfg.cnn_channels(i)
            stages.append(_Stage([BasicBlock(prev, c, 2, rng, dtype), BasicBlock(c, c, 1, rng, dtype)]))
            prev = c
        self.stages = stages

    def forward(self, img: Tensor) -> dict[int, Tensor]:
        if tuple(img.shape[-2:]) != self.cfg.cnn_input_hw:
            raise ValueError(f"CNN input {img.shape[-2:]} != configured {self.cfg.cnn_input_hw}")
        x = self.stem(img)
        feats = {}
        for i, stage in zip((2, 3, 4, 5), self.stages):
            x = stage(x)
            feats[i] = x
        return feats


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


def window_partition(x: Tensor, win: int) -> Tensor:
    """(B, H, W, C) -> (B * nW, win*win, C), windows in row-major order."""
    b, h, w, c = x.shape
    x = x.reshape(b, h // win, win, w // win, win, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (h // win) * (w // win), win * win, c)


def window_reverse(x: Tensor, win: int, b: int, h: int, w: int) -> Tensor:
    c = x.shape[-1]
    x = x.reshape(b, h // win, w // win, win, win, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def _shift_mask(h: int, w: int, win: int, shift: int, dtype) -> np.ndarray:
    """Additive mask (nW, T, T) that blocks attention across rolled-in regions."""
    img = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
        for ws in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
            img[hs, ws] = cnt
            cnt += 1
    lab = img.reshape(h // win, win, w // win, win).transpose(0, 2, 1, 3).reshape(-1, win * win)
    diff = lab[:, :, None] != lab[:, None, :]
    return np.where(diff, -1e9, 0.0).astype(dtype)


class WindowAttention(Module):
    """Multi-head self-attention inside non-overlapping windows of a token grid."""

    def __init__(self, dim: int, heads: int, window: int, rng, shift: int = 0, dtype=None):
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.window, self.shift = dim, heads, window, shift
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self._mask_cache: dict = {}

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        win = self.window
        if h % win or w % win:
            raise ConfigError(f"window {win} does not divide grid {h}x{w}")
        shift = self.shift if min(h, w) > win else 0
        if shift:
            x = x.roll((-shift, -shift), (1, 2))
        tokens = window_partition(x, win)
        bn, t, _ = tokens.shape
        nh, dh = self.heads, c // self.heads

        def heads(z):
            return z.reshape(bn, t, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(tokens)), heads(self.k(tokens)), heads(self.v(tokens))
        logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        if shift:
            key = (h, w, x.dtype)
            if key not in self._mask_cache:
                self._mask_cache[key] = _shift_mask(h, w, win, shift, x.dtype)
            mask = self._mask_cache[key]
            nw = mask.shape[0]
            logits = (logits.reshape(b, nw, nh, t, t) + Tensor(mask[None, :, None])).reshape(bn, nh, t, t)
        attn = F.softmax(logits, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(bn, t, c)
        out = window_reverse(self.proj(out), win, b, h, w)
        if shift:
            out = out.roll((shift, shift), (1, 2))
        return out


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: int, rng, shift: int = 0, dtype=None):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, heads, window, rng, shift=shift, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, dtype=dtype)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class PatchMerging(Module):
    """Concatenate each 2x2 token neighborhood and halve the widened channels: (H, W, C) -> (H/2, W/2, 2C)."""

    def __init__(self, dim: int, rng, dtype=None):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduce = Linear(4 * dim, 2 * dim, rng, bias=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        x = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * c)
        return self.reduce(self.norm(x))


class GridMerging(Module):
    """Stride-1 variant of patch merging: each token gathers its 2x2 forward
    neighborhood (edge-replicated) and 4C is reduced back to C, keeping the grid."""

    def __init__(self, dim: int, rng, dtype=None):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduce = Linear(4 * dim, dim, rng, bias=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        xp = concat([x, x[:, h - 1 : h]], axis=1)
        xp = concat([xp, xp[:, :, w - 1 : w]], axis=2)
        parts = [xp[:, :h, :w], xp[:, 1:, :w], xp[:, :h, 1:], xp[:, 1:, 1:]]
        return self.reduce(self.norm(concat(parts, axis=3)))


class TransformerEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=None):
        cfg.validate()
        self.cfg = cfg
        dtype = dtype or get_default_dtype()
        p = cfg.patch_size
        c1 = cfg.trans_channels(1)
        g = cfg.trans_grid(1)
        self.patch_embed = Conv2d(3, c1, p, rng, stride=p, padding=0, dtype=dtype)
        self.embed_norm = LayerNorm(c1, dtype=dtype)
        self.pos_embed = Parameter((0.02 * rng.standard_normal((1, g[0], g[1], c1))).astype(dtype))
        stages, merges = [], []
        for i in (1, 2, 3):
            dim = cfg.trans_channels(i)
            blocks = []
            for j in range(cfg.trans_depths[i - 1]):
                shift = cfg.window_size // 2 if (cfg.shift_windows and j % 2 == 1) else 0
                blocks.append(
                    TransformerBlock(dim, cfg.heads_per_stage[i - 1], cfg.window_size, cfg.mlp_ratio, rng, shift, dtype)
                )
            stages.append(_Stage(blocks))
            if i < 3:
                merges.append(PatchMerging(dim, rng, dtype))
        self.stages = stages
        self.merges = merges
        self.out_norms = [LayerNorm(cfg.trans_channels(i), dtype=dtype) for i in (1, 2, 3)]
        self.stage4_merge = GridMerging(cfg.trans_channels(3), rng, dtype)

    def forward(self, img: Tensor) -> dict[int, Tensor]:
        if tuple(img.shape[-2:]) != self.cfg.trans_input_hw:
            raise ValueError(f"transformer input {img.shape[-2:]} != configured {self.cfg.trans_input_hw}")
        x = self.patch_embed(img).transpose(0, 2, 3, 1)
        x = self.embed_norm(x) + self.pos_embed
        feats = {}
        for i in (1, 2, 3):
            x = self.stages[i - 1](x)
            feats[i] = self.out_norms[i - 1](x).transpose(0, 3, 1, 2)
            if i < 3:
                x = self.merges[i - 1](x)
        feats[4] = self.stage4_merge(x).transpose(0, 3, 1, 2)
        return feats


def select_graft_pair(pyr: FeaturePyramid, stage: int = 2) -> tuple[Tensor, Tensor]:
    """Return ``(cnn[5], trans[stage])``; stage 2 is the default pairing."""
    if 5 not in pyr.cnn:
        raise KeyError("feature pyramid has no CNN stage 5")
    if stage not in pyr.trans:
        raise KeyError(f"feature pyramid has no transformer stage {stage} (have {sorted(pyr.trans)})")
    return pyr.cnn[5], pyr.trans[stage]
