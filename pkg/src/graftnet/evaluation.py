"""Probability correction at inference and the Dice / IoU / F1 metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import DataError, Manifest, load_sample, save_mask
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

def pcs(logits, normalize: str = "count") -> np.ndarray:
    """Probability correction: rescale positive and negative logits separately, then sigmoid.

    ``normalize="count"`` divides each class's logits by its pixel count
    (``z >= 0`` counts as positive); ``"fraction"`` divides by the class's
    share of the map instead. Either way the sign of every logit, hence the
    0.5-thresholded mask, is preserved.
    """
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    pos = z >= 0
    n_pos = int(pos.sum())
    n_neg = z.size - n_pos
    if normalize == "count":
        d_pos, d_neg = max(n_pos, 1), max(n_neg, 1)
    elif normalize == "fraction":
        d_pos, d_neg = max(n_pos, 1) / z.size, max(n_neg, 1) / z.size
    else:
        raise ValueError(f"unknown PCS normalization {normalize!r}")
    return expit(np.where(pos, z / d_pos, z / d_neg))


def dice(pred, target) -> float:
    """``2 sum(p t) / (sum p + sum t)``; two empty maps score 1."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    denom = p.sum() + t.sum()
    return 1.0 if denom == 0 else float(2.0 * (p * t).sum() / denom)


def iou_metric(pred, target) -> float:
    """``sum(p t) / (sum p + sum t - sum(p t))``; two empty maps score 1."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    inter = (p * t).sum()
    union = p.sum() + t.sum() - inter
    return 1.0 if union == 0 else float(inter / union)


def f1(pred_bin, target) -> float:
    """Pixelwise F1 of a binary prediction, ``2 tp / (2 tp + fp + fn)``."""
    p = np.asarray(pred_bin).astype(bool)
    t = np.asarray(target).astype(bool)
    tp = np.count_nonzero(p & t)
    wrong = np.count_nonzero(p ^ t)
    return 1.0 if tp + wrong == 0 else 2 * tp / (2 * tp + wrong)


@dataclass
class ImageScore:
    id: str
    dice: float
    iou: float
    f1: float

    def line(self) -> str:
        return f"id={self.id} dice={self.dice:.6f} iou={self.iou:.6f} f1={self.f1:.6f}"


@dataclass
class MetricsReport:
    m_dice: float
    m_iou: float
    m_f1: float
    per_image: list[ImageScore] = field(default_factory=list)
    n_images: int = 0
    skipped: list[str] = field(default_factory=list)

    @classmethod
    def from_scores(cls, scores: list[ImageScore], skipped: list[str] | None = None) -> "MetricsReport":
        if not scores:
            raise ValueError("no images were evaluated")
        return cls(
            float(np.mean([s.dice for s in scores])),
            float(np.mean([s.iou for s in scores])),
            float(np.mean([s.f1 for s in scores])),
            list(scores),
            len(scores),
            list(skipped or []),
        )

    def table(self) -> str:
        rows = [
            f"{'metric':<8} {'value':>8}",
            f"{'mDice':<8} {self.m_dice:>8.4f}",
            f"{'mIoU':<8} {self.m_iou:>8.4f}",
            f"{'mF1':<8} {self.m_f1:>8.4f}",
            f"{'images':<8} {self.n_images:>8d}",
        ]
        if self.skipped:
            rows.append(f"skipped: {', '.join(self.skipped)}")
        return "\n".join(rows)

    def records(self) -> str:
        return "\n".join(s.line() for s in self.per_image)


def score_logits(logits: np.ndarray, mask: np.ndarray, use_pcs: bool = False, threshold: float | None = None):
    """Metrics for one logit map: soft Dice/IoU unless ``threshold`` is given; F1 always at 0.5."""
    z = np.asarray(logits, dtype=np.float64).reshape(mask.shape)
    prob = pcs(z) if use_pcs else expit(z)
    pred = prob if threshold is None else (prob >= threshold).astype(np.float64)
    return dice(pred, mask), iou_metric(pred, mask), f1(prob >= 0.5, mask), prob


def predict_logits(model, image: np.ndarray) -> np.ndarray:
    """Eval-mode forward for one ``(3, H, W)`` image; returns ``(H, W)`` logits."""
    model.eval()
    with no_grad():
        out = model(Tensor(np.asarray(image, dtype=model.dtype)[None]))
    return out.logits.data[0, 0]


def evaluate_samples(model, samples, use_pcs: bool = False, threshold: float | None = None) -> MetricsReport:
    scores = []
    for s in samples:
        d, i, f, _ = score_logits(predict_logits(model, s.image), s.mask, use_pcs, threshold)
        scores.append(ImageScore(s.id, d, i, f))
    return MetricsReport.from_scores(scores)


def evaluate_dataset(
    model,
    manifest: Manifest,
    use_pcs: bool = False,
    threshold: float | None = None,
    mask_dir: str | Path | None = None,
) -> MetricsReport:
    """Evaluate every manifest entry; unreadable entries are skipped with a warning and listed."""
    if len(manifest) == 0:
        raise DataError(f"cannot evaluate an empty dataset ({manifest.path})")
    hw = model.cfg.cnn_input_hw
    scores, skipped = [], []
    for entry in manifest:
        try:
            sample = load_sample(entry, hw)
        except DataError as exc:
            log.warning("skipping %s: %s", entry.id, exc)
            skipped.append(entry.id)
            continue
        d, i, f, prob = score_logits(predict_logits(model, sample.image), sample.mask, use_pcs, threshold)
        scores.append(ImageScore(sample.id, d, i, f))
        if mask_dir is not None:
            Path(mask_dir).mkdir(parents=True, exist_ok=True)
            save_mask(prob >= 0.5, Path(mask_dir) / f"{sample.id}.png")
    if not scores:
        raise DataError(f"none of the {len(manifest)} manifest entries could be loaded")
    return MetricsReport.from_scores(scores, skipped)
