"""SGD with momentum, cosine learning-rate annealing, augmentation and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .checkpoint import save_checkpoint
from .config import RunConfig, TrainConfig
from .data import Sample
from .objective import LossReport, joint_loss
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


def cosine_lr(t: int, total: int, lr0: float, eta_min: float = 0.0) -> float:
    if total <= 0:
        raise ValueError("cosine_lr needs a positive horizon")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if t == total:
        return float(eta_min)
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * t / total))


class SGD:
    """Classical momentum SGD with weight decay folded into the gradient.

    ``buf = momentum * buf + (grad + wd * param)``; ``param -= lr * buf``.
    Parameters of rank <= 1 (biases, norm gains) are not decayed.
    """

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim > 1:
                g = g + self.weight_decay * p.data
            buf = self.buffers.get(name)
            if buf is None:
                # first step: buffer starts at zero, so buf = g
                buf = np.array(g, dtype=p.dtype, copy=True)
            else:
                buf = self.momentum * buf + g
            self.buffers[name] = buf.astype(p.dtype, copy=False)
            p.data = (p.data - lr * self.buffers[name]).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def named_buffers(self):
        return list(self.buffers.items())

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        dtypes = {n: p.dtype for n, p in self.params}
        self.buffers = {n: np.asarray(b, dtype=dtypes.get(n, b.dtype)).copy() for n, b in buffers.items()}


def sgd_update(params, grads, state: dict, lr: float, momentum: float, wd: float):
    """Functional form of one SGD step on plain arrays; returns new params and updates ``state``."""
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g) + wd * np.asarray(p)
        buf = g if i not in state else momentum * state[i] + g
        state[i] = buf
        out.append(np.asarray(p) - lr * buf)
    return out


def augment(sample: Sample, cfg: TrainConfig, rng: np.random.Generator) -> Sample:
    """Random flips/rotation applied identically to image and mask; brightness on the image only."""
    img, mask = sample.image, sample.mask
    if cfg.hflip and rng.random() < 0.5:
        img, mask = img[:, :, ::-1], mask[:, ::-1]
    if cfg.vflip and rng.random() < 0.5:
        img, mask = img[:, ::-1, :], mask[::-1, :]
    if cfg.rotate_deg > 0:
        angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
        img = ndimage.rotate(img, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
        mask = ndimage.rotate(mask, angle, axes=(0, 1), reshape=False, order=0, mode="constant", cval=0)
    if cfg.brightness_delta > 0:
        img = np.clip(img + rng.uniform(-cfg.brightness_delta, cfg.brightness_delta), 0.0, 1.0)
    return Sample(sample.id, np.ascontiguousarray(img, dtype=sample.image.dtype), np.ascontiguousarray(mask))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


@dataclass
class TrainResult:
    model: object
    log: list[LossReport] = field(default_factory=list)
    lines: list[str] = field(default_factory=list)
    optimizer: SGD | None = None
    step: int = 0


def train(
    model,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    run_config: RunConfig | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train in place; returns the model and one averaged :class:`LossReport` per epoch."""
    cfg.validate()
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    params = list(model.named_parameters())
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    dtype = model.dtype
    result = TrainResult(model)
    step = 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(4)
        count = 0
        lr = cfg.lr0
        for bi, idx in enumerate(_batches(len(dataset), cfg.batch_size, rng)):
            batch = [augment(dataset[i], cfg, rng) for i in idx]
            img = np.stack([s.image for s in batch]).astype(dtype)
            mask = np.stack([s.mask for s in batch]).astype(dtype)[:, None]
            lr = cosine_lr(step, total, cfg.lr0, cfg.eta_min)
            opt.zero_grad()
            out = model(Tensor(img))
            loss, rep = joint_loss(out, mask, model.cfg)
            if not math.isfinite(rep.l_total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {bi} ({rep.line()})")
            loss.backward()
            opt.step(lr)
            step += 1
            sums += (rep.l_seg, rep.l_att, rep.l_aux, rep.l_total)
            count += 1
        mean = sums / count
        rep = LossReport(*mean, lambda_aux=model.cfg.lambda_aux)
        result.log.append(rep)
        line = f"epoch={epoch} lr={lr:.6g} {rep.line()}"
        result.lines.append(line)
        log.info(line)
        if on_epoch is not None:
            on_epoch(line)
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            rc = run_config or RunConfig(model.cfg, cfg)
            save_checkpoint(Path(out_dir) / f"epoch{epoch:04d}.trnc", model, rc, opt, epoch, step, rng)
    result.optimizer = opt
    result.step = step
    return result
