"""Ablation studies: which feature pair feeds the grafting module, and which modules are kept."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import ModelConfig, RunConfig
from .data import Sample
from .evaluation import evaluate_samples
from .model import GraftNet
from .trainer import train

log = logging.getLogger(__name__)

STUDIES = ("pairs", "modules")

MODULE_ROWS = (
    ("cnn only", dict(use_cnn=True, use_trans=False, use_cgm=False)),
    ("transformer only", dict(use_cnn=False, use_trans=True, use_cgm=False)),
    ("both, no grafting", dict(use_cnn=True, use_trans=True, use_cgm=False)),
    ("full", dict(use_cnn=True, use_trans=True, use_cgm=True)),
)


def study_variants(study: str, base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """Named model configs for one study, all derived from ``base``."""
    if study == "pairs":
        return [
            (f"cnn5 + trans{i}", dataclasses.replace(base, graft_stage=i, graft_grid=None, use_cnn=True,
                                                     use_trans=True, use_cgm=True))
            for i in (1, 2, 3, 4)
        ]
    if study == "modules":
        return [(name, dataclasses.replace(base, **flags)) for name, flags in MODULE_ROWS]
    raise ValueError(f"unknown study {study!r}; expected one of {STUDIES}")


@dataclass
class AblationRow:
    name: str
    n_params: int
    dice: list[float] = field(default_factory=list)
    iou: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)

    @property
    def m_dice(self) -> float:
        return float(np.mean(self.dice))

    @property
    def m_iou(self) -> float:
        return float(np.mean(self.iou))

    @property
    def m_f1(self) -> float:
        return float(np.mean(self.f1))

    @property
    def sd_dice(self) -> float:
        return float(np.std(self.dice))


@dataclass
class AblationResult:
    study: str
    rows: list[AblationRow]
    seeds: list[int]

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def table(self) -> str:
        w = max(len(r.name) for r in self.rows)
        out = [f"study={self.study} seeds={','.join(map(str, self.seeds))}",
               f"{'variant':<{w}} {'params':>9} {'mDice':>7} {'sd':>6} {'mIoU':>7} {'mF1':>7}"]
        for r in self.rows:
            out.append(f"{r.name:<{w}} {r.n_params:>9d} {r.m_dice:>7.4f} {r.sd_dice:>6.4f} "
                       f"{r.m_iou:>7.4f} {r.m_f1:>7.4f}")
        return "\n".join(out)


def split_samples(samples: Sequence[Sample], test_fraction: float = 0.25) -> tuple[list[Sample], list[Sample]]:
    """Deterministic split: the last ``test_fraction`` of the list is held out."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = max(1, int(round(len(samples) * test_fraction)))
    if n_test >= len(samples):
        raise ValueError(f"need at least 2 samples to split, got {len(samples)}")
    return list(samples[:-n_test]), list(samples[-n_test:])


def run_study(
    study: str,
    run_config: RunConfig,
    train_samples: Sequence[Sample],
    test_samples: Sequence[Sample],
    seeds: Sequence[int] = (0, 1, 2),
    threshold: float | None = None,
    progress: Callable[[str], None] | None = None,
) -> AblationResult:
    """Train every variant once per seed and score soft metrics on the held-out samples."""
    rows = []
    for name, mcfg in study_variants(study, run_config.model):
        row = None
        for seed in seeds:
            mc = dataclasses.replace(mcfg, seed=run_config.model.seed + seed)
            tc = dataclasses.replace(run_config.train, seed=run_config.train.seed + seed)
            model = GraftNet(mc)
            if row is None:
                row = AblationRow(name, model.num_parameters())
            train(model, train_samples, tc)
            rep = evaluate_samples(model, test_samples, threshold=threshold)
            row.dice.append(rep.m_dice)
            row.iou.append(rep.m_iou)
            row.f1.append(rep.m_f1)
            msg = f"variant={name!r} seed={seed} dice={rep.m_dice:.4f} iou={rep.m_iou:.4f}"
            log.info(msg)
            if progress is not None:
                progress(msg)
        rows.append(row)
    return AblationResult(study, rows, list(seeds))
