"""Full dual-branch segmentation network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import ModelConfig
from .decoder import AuxHead, Decoder
from .encoders import CNNEncoder, FeaturePyramid, TransformerEncoder, select_graft_pair
from .grafting import CrossGraftingModule, GraftPack
from .nn import Module, Parameter
from .tensor import Tensor, as_tensor, get_default_dtype


@dataclass
class ModelOutput:
    logits: Tensor
    aux_r: Tensor | None
    aux_s: Tensor | None
    graft: GraftPack | None
    pyramid: FeaturePyramid


class GraftNet(Module):
    """CNN + transformer encoders, cross grafting, staggered decoder.

    ``use_cnn`` / ``use_trans`` / ``use_cgm`` switch off parts for ablations; a
    disabled branch's features are replaced by learned constant tensors so the
    decoder wiring is unchanged.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, dtype=None):
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(dtype or get_default_dtype())
        rng = np.random.default_rng(cfg.seed) if rng is None else rng

        self.cnn = CNNEncoder(cfg, rng, dtype) if cfg.use_cnn else None
        self.trans = TransformerEncoder(cfg, rng, dtype) if cfg.use_trans else None
        self.cnn_const = None
        self.trans_const = None
        if not cfg.use_cnn:
            self.cnn_const = [
                _Const((1, cfg.cnn_channels(i)) + cfg.cnn_grid(i), dtype) for i in (2, 3, 4, 5)
            ]
        if not cfg.use_trans:
            self.trans_const = [
                _Const((1, cfg.trans_channels(i)) + cfg.trans_grid(i), dtype) for i in (1, 2, 3, 4)
            ]

        g = cfg.resolved_graft_grid()
        c_sel = cfg.trans_channels(cfg.graft_stage)
        if cfg.use_cgm:
            self.cgm = CrossGraftingModule(cfg, cfg.cnn_channels(5), c_sel, rng, dtype)
            self.z_const = None
        else:
            self.cgm = None
            self.z_const = _Const((1, cfg.d_graft, g, g), dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        self.aux_r = AuxHead(cfg.cnn_channels(5), rng, dtype) if cfg.use_cnn else None
        self.aux_s = AuxHead(c_sel, rng, dtype) if cfg.use_trans else None

    @property
    def dtype(self) -> np.dtype:
        return self.decoder.head.weight.dtype

    def encode(self, img: Tensor) -> FeaturePyramid:
        cfg = self.cfg
        img = as_tensor(img, self.dtype)
        b = img.shape[0]
        pyr = FeaturePyramid()
        if self.cnn is not None:
            pyr.cnn = self.cnn(img)
        else:
            pyr.cnn = {i: c(b) for i, c in zip((2, 3, 4, 5), self.cnn_const)}
        if self.trans is not None:
            small = F.resize_bilinear(img, *cfg.trans_input_hw)
            pyr.trans = self.trans(small)
        else:
            pyr.trans = {i: c(b) for i, c in zip((1, 2, 3, 4), self.trans_const)}
        return pyr

    def forward(self, img) -> ModelOutput:
        cfg = self.cfg
        img = as_tensor(img, self.dtype)
        pyr = self.encode(img)
        r_feat, s_feat = select_graft_pair(pyr, cfg.graft_stage)
        graft = None
        if self.cgm is not None:
            graft = self.cgm(r_feat, s_feat)
            z = graft.z
        else:
            z = self.z_const(img.shape[0])
        logits = self.decoder(pyr.cnn, pyr.trans, z)
        hw = cfg.cnn_input_hw
        aux_r = self.aux_r(r_feat, hw) if self.aux_r is not None else None
        aux_s = self.aux_s(s_feat, hw) if self.aux_s is not None else None
        return ModelOutput(logits, aux_r, aux_s, graft, pyr)


class _Const(Module):
    """Learned constant feature map, broadcast over the batch."""

    def __init__(self, shape: tuple, dtype):
        self.value = Parameter(np.zeros(shape, dtype=dtype))

    def forward(self, batch: int) -> Tensor:
        return F.broadcast_batch(self.value, batch)
