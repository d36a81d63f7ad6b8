"""Model and training configuration plus the ``[model]``/``[train]`` text format.

The config file is INI-like::

    [model]
    cnn_input_hw = 256,256
    d_graft = 32

    [train]
    lr0 = 0.03

Unknown keys are rejected; omitted keys keep their defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """A configuration value violates a model or training constraint."""


@dataclass
class ModelConfig:
    cnn_input_hw: tuple[int, int] = (256, 256)
    trans_input_hw: tuple[int, int] = (64, 64)
    cnn_channel_base: int = 8
    trans_embed_base: int = 16
    patch_size: int = 4
    window_size: int = 4
    heads_per_stage: tuple[int, ...] = (2, 4, 8)
    trans_depths: tuple[int, ...] = (2, 2, 2)
    mlp_ratio: int = 4
    shift_windows: bool = False
    d_graft: int = 32
    # None -> sqrt(d_graft)
    alpha: float | None = None
    lambda_aux: float = 0.25
    att_pos_weight: float = 4.0
    # None -> grid of the selected transformer feature
    graft_grid: int | None = None
    graft_stage: int = 2
    shared_qkv: bool = False
    use_cnn: bool = True
    use_trans: bool = True
    use_cgm: bool = True
    seed: int = 0

    def __post_init__(self):
        self.cnn_input_hw = tuple(int(v) for v in self.cnn_input_hw)
        self.trans_input_hw = tuple(int(v) for v in self.trans_input_hw)
        self.heads_per_stage = tuple(int(v) for v in self.heads_per_stage)
        self.trans_depths = tuple(int(v) for v in self.trans_depths)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        """Full-size layout: 1024x1024 CNN input, 224x224 transformer input."""
        base = dict(
            cnn_input_hw=(1024, 1024),
            trans_input_hw=(224, 224),
            cnn_channel_base=32,
            trans_embed_base=64,
            patch_size=4,
            window_size=7,
            d_graft=128,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Smallest useful layout; fast enough for CPU training and gradient checks."""
        base = dict(
            cnn_input_hw=(64, 64),
            trans_input_hw=(32, 32),
            cnn_channel_base=4,
            trans_embed_base=8,
            window_size=2,
            trans_depths=(1, 1, 1),
            d_graft=16,
        )
        base.update(overrides)
        return cls(**base)

    # -- derived sizes --------------------------------------------------
    @property
    def attn_scale(self) -> float:
        return math.sqrt(self.d_graft) if self.alpha is None else float(self.alpha)

    def cnn_channels(self, stage: int) -> int:
        return self.cnn_channel_base * 2 ** (stage - 1)

    def cnn_grid(self, stage: int) -> tuple[int, int]:
        h, w = self.cnn_input_hw
        return h // 2**stage, w // 2**stage

    def trans_channels(self, stage: int) -> int:
        return self.trans_embed_base * 2 ** min(stage, 3)

    def trans_grid(self, stage: int) -> tuple[int, int]:
        h, w = self.trans_input_hw
        s = min(stage, 3) - 1
        return h // self.patch_size // 2**s, w // self.patch_size // 2**s

    def resolved_graft_grid(self) -> int:
        if self.graft_grid is not None:
            return self.graft_grid
        return self.trans_grid(self.graft_stage)[0]

    def validate(self) -> "ModelConfig":
        h, w = self.cnn_input_hw
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"cnn_input_hw {self.cnn_input_hw} must be positive multiples of 32")
        th, tw = self.trans_input_hw
        q = self.patch_size * 8
        if th <= 0 or tw <= 0 or th % q or tw % q:
            raise ConfigError(f"trans_input_hw {self.trans_input_hw} must be positive multiples of patch_size*8 = {q}")
        if len(self.heads_per_stage) != 3 or len(self.trans_depths) != 3:
            raise ConfigError("heads_per_stage and trans_depths need one entry per transformer stage (3)")
        for stage in (1, 2, 3):
            gh, gw = self.trans_grid(stage)
            if gh % self.window_size or gw % self.window_size:
                raise ConfigError(f"window_size {self.window_size} does not divide stage-{stage} grid {gh}x{gw}")
            c, nh = self.trans_channels(stage), self.heads_per_stage[stage - 1]
            if nh <= 0 or c % nh:
                raise ConfigError(f"stage-{stage} width {c} not divisible by {nh} heads")
        if self.cnn_channel_base <= 0 or self.trans_embed_base <= 0:
            raise ConfigError("channel bases must be positive")
        if self.d_graft <= 0 or self.d_graft % 2:
            raise ConfigError(f"d_graft must be a positive even integer, got {self.d_graft}")
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.lambda_aux < 0:
            raise ConfigError(f"lambda_aux must be >= 0, got {self.lambda_aux}")
        if self.graft_stage not in (1, 2, 3, 4):
            raise ConfigError(f"graft_stage must be in 1..4, got {self.graft_stage}")
        if self.graft_grid is not None and self.graft_grid < 1:
            raise ConfigError(f"graft_grid must be >= 1, got {self.graft_grid}")
        if not (self.use_cnn or self.use_trans):
            raise ConfigError("at least one encoder branch must be enabled")
        if self.use_cgm and not (self.use_cnn and self.use_trans):
            raise ConfigError("the grafting module needs both encoder branches")
        return self


@dataclass
class TrainConfig:
    lr0: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 7e-5
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    eta_min: float = 0.0
    hflip: bool = True
    vflip: bool = True
    rotate_deg: float = 15.0
    brightness_delta: float = 0.1
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        if not self.lr0 >= 0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0 or self.eta_min < 0:
            raise ConfigError("weight_decay and eta_min must be >= 0")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(kind: str, text: str, key: str):
    text = text.strip()
    try:
        if text.lower() == "none":
            if "None" not in kind:
                raise ValueError("value may not be none")
            return None
        if kind.startswith("tuple"):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    raise ConfigError(f"{key}: unsupported field type {kind}")


def _section(cls, items: dict[str, str], section: str):
    kinds = {f.name: str(f.type) for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in items.items():
        if key not in kinds:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _parse(kinds[key], text, f"[{section}] {key}")
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    extra = set(cp.sections()) - {"model", "train"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    model = _section(ModelConfig, dict(cp["model"]) if cp.has_section("model") else {}, "model")
    train = _section(TrainConfig, dict(cp["train"]) if cp.has_section("train") else {}, "train")
    return RunConfig(model.validate(), train.validate())


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for name, obj in (("model", cfg.model), ("train", cfg.train)):
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")
