"""Joint training objective: segmentation, attention and auxiliary terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor

IOU_SMOOTH = 1.0


@dataclass
class LossReport:
    l_seg: float
    l_att: float
    l_aux: float
    l_total: float
    lambda_aux: float

    def line(self) -> str:
        return f"l_seg={self.l_seg:.6f} l_att={self.l_att:.6f} l_aux={self.l_aux:.6f} l_total={self.l_total:.6f}"


def _target(logits: Tensor, target) -> np.ndarray:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    if t.shape != logits.shape:
        if t.size == logits.size:
            t = t.reshape(logits.shape)
        else:
            raise ShapeError(f"target shape {t.shape} does not match logits {logits.shape}")
    return t


def bce(logits: Tensor, target) -> Tensor:
    return F.bce_with_logits(logits, _target(logits, target))


def iou_loss(logits: Tensor, target, eps: float = IOU_SMOOTH) -> Tensor:
    """Soft IoU loss ``1 - (sum p*t + eps) / (sum p + sum t - sum p*t + eps)``.

    Rank <= 2 inputs are one map. Higher ranks treat axis 0 as the batch and
    average the per-sample losses.
    """
    t = _target(logits, target)
    p = F.sigmoid(logits)
    axes = None if logits.ndim <= 2 else tuple(range(1, logits.ndim))
    inter = (p * t).sum(axis=axes)
    t_sum = t.sum() if axes is None else t.sum(axis=axes)
    union = p.sum(axis=axes) + t_sum - inter
    return (1.0 - (inter + eps) / (union + eps)).mean()


def seg_loss(logits: Tensor, mask) -> Tensor:
    return (bce(logits, mask) + iou_loss(logits, mask)) * 0.5


def _adaptive_avg_pool(mask: np.ndarray, g: int) -> np.ndarray:
    """Area-average ``(..., H, W)`` down to ``(..., g, g)`` with floor/ceil bin edges."""
    h, w = mask.shape[-2:]
    out = np.empty(mask.shape[:-2] + (g, g), dtype=np.float64)
    for i in range(g):
        r0, r1 = (i * h) // g, -(-((i + 1) * h) // g)
        for j in range(g):
            c0, c1 = (j * w) // g, -(-((j + 1) * w) // g)
            out[..., i, j] = mask[..., r0:r1, c0:c1].mean(axis=(-2, -1))
    return out


def gt_attention_map(mask, grid: int) -> np.ndarray:
    """Pool the mask to ``grid x grid``, flatten to ``v`` and return ``v v^T``.

    Accepts ``(H, W)`` or batched ``(B, H, W)`` / ``(B, 1, H, W)`` masks.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 4:
        m = m[:, 0]
    h, w = m.shape[-2:]
    if grid > min(h, w):
        raise ValueError(f"grid {grid} exceeds mask size {h}x{w}")
    v = _adaptive_avg_pool(m, grid).reshape(m.shape[:-2] + (grid * grid,))
    return v[..., :, None] * v[..., None, :]


def att_loss(ctam: Tensor, mask, pos_weight: float = 4.0) -> Tensor:
    """Weighted BCE between CTAM (treated as logits) and the GT attention map, weight ``1 + pos_weight * t``."""
    b = ctam.shape[0]
    n = ctam.shape[-1]
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ShapeError(f"CTAM side {n} is not a square token count")
    target = gt_attention_map(np.asarray(mask).reshape(b, *np.asarray(mask).shape[-2:]), g)
    if target.shape[-1] != n:
        raise ShapeError(f"CTAM side {n} != GT attention side {target.shape[-1]}")
    target = target.reshape(ctam.shape).astype(ctam.dtype)
    return F.bce_with_logits(ctam, target, weight=1.0 + pos_weight * target)


def aux_loss(aux_r: Tensor | None, aux_s: Tensor | None, mask) -> Tensor | None:
    terms = [seg_loss(a, mask) for a in (aux_r, aux_s) if a is not None]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def total_loss(l_seg: Tensor, l_att: Tensor | None, l_aux: Tensor | None, lambda_aux: float) -> tuple[Tensor, LossReport]:
    if lambda_aux < 0:
        raise ValueError(f"lambda_aux must be >= 0, got {lambda_aux}")
    total = l_seg
    if l_att is not None:
        total = total + l_att
    if l_aux is not None:
        total = total + l_aux * lambda_aux
    seg_v = l_seg.item()
    att_v = 0.0 if l_att is None else l_att.item()
    aux_v = 0.0 if l_aux is None else l_aux.item()
    report = LossReport(seg_v, att_v, aux_v, total.item(), lambda_aux)
    return total, report


def joint_loss(out, mask, cfg) -> tuple[Tensor, LossReport]:
    """Full objective for a :class:`~graftnet.model.ModelOutput` against a ``(B, H, W)`` mask batch."""
    mask = np.asarray(mask)
    l_seg = seg_loss(out.logits, mask)
    l_att = att_loss(out.graft.ctam, mask, cfg.att_pos_weight) if out.graft is not None else None
    l_aux = aux_loss(out.aux_r, out.aux_s, mask)
    return total_loss(l_seg, l_att, l_aux, cfg.lambda_aux)
