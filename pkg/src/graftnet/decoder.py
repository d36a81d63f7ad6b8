"""Staggered decoder: transformer features first (D1), grafted features next
(D2), CNN skips last (D3). Also the two auxiliary branch heads."""

from __future__ import annotations

from . import functional as F
from .config import ModelConfig
from .nn import Conv2d, ConvBNGelu, Module
from .tensor import ShapeError, Tensor, concat


def decoder_widths(cfg: ModelConfig) -> tuple[int, int, int]:
    d = cfg.d_graft
    return max(2 * d, 16), max(d, 16), max(d // 2, 16)


class _FuseBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng, dtype=None):
        self.a = ConvBNGelu(c_in, c_out, 3, rng, dtype=dtype)
        self.b = ConvBNGelu(c_out, c_out, 3, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.b(self.a(x))


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=None):
        self.cfg = cfg
        w1, w2, w3 = decoder_widths(cfg)
        t2, t3 = cfg.trans_channels(2), cfg.trans_channels(3)
        self.d1_proj = Conv2d(t2, w1, 1, rng, dtype=dtype)
        self.d1 = _FuseBlock(t3 + w1, w1, rng, dtype)
        self.d2 = _FuseBlock(w1 + cfg.d_graft, w2, rng, dtype)
        d3 = []
        prev = w2
        for stage in (4, 3, 2):
            d3.append(_FuseBlock(prev + cfg.cnn_channels(stage), w3, rng, dtype))
            prev = w3
        self.d3 = d3
        self.head = Conv2d(w3, 1, 1, rng, dtype=dtype)

    def forward(self, cnn: dict[int, Tensor], trans: dict[int, Tensor], z: Tensor) -> Tensor:
        cfg = self.cfg
        for i in (2, 3):
            if tuple(trans[i].shape[-2:]) != cfg.trans_grid(i):
                raise ShapeError(f"decoder: transformer stage {i} grid {trans[i].shape[-2:]} != {cfg.trans_grid(i)}")
        for i in (2, 3, 4):
            if tuple(cnn[i].shape[-2:]) != cfg.cnn_grid(i):
                raise ShapeError(f"decoder: CNN stage {i} grid {cnn[i].shape[-2:]} != {cfg.cnn_grid(i)}")
        if z.ndim != 4 or z.shape[1] != cfg.d_graft:
            raise ShapeError(f"decoder: grafted features must be B x {cfg.d_graft} x g x g, got {z.shape}")

        gh, gw = cfg.trans_grid(2)
        x = F.resize_bilinear(trans[3], gh, gw)
        x = self.d1(concat([x, self.d1_proj(trans[2])], axis=1))

        gh, gw = 2 * gh, 2 * gw
        x = F.resize_bilinear(x, gh, gw)
        x = self.d2(concat([x, F.resize_bilinear(z, gh, gw)], axis=1))

        for stage, block in zip((4, 3, 2), self.d3):
            gh, gw = cfg.cnn_grid(stage)
            x = F.resize_bilinear(x, gh, gw)
            x = block(concat([x, cnn[stage]], axis=1))

        # 1x1 conv commutes with bilinear resampling, so project before the final upsample
        h, w = cfg.cnn_input_hw
        return F.resize_bilinear(self.head(x), h, w)


class AuxHead(Module):
    """conv1x1 to one channel, bilinear upsample to the mask size; returns logits."""

    def __init__(self, c_in: int, rng, dtype=None):
        self.conv = Conv2d(c_in, 1, 1, rng, dtype=dtype)

    def forward(self, feat: Tensor, out_hw: tuple[int, int]) -> Tensor:
        return F.resize_bilinear(self.conv(feat), *out_hw)
