"""Run configuration: JSON files with a strict schema.

Unknown keys are errors, not warnings, so a typo in an ablation config
fails loudly instead of silently running the wrong experiment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class DataConfig:
    source: str = "synthetic"        # "synthetic" or a dataset directory
    num_classes: int = 16
    per_class: int = 60
    image_size: int = 32
    channels: int = 1
    noise: float = 0.1
    standardize: bool = True
    base_frac: float = 0.625         # 10/16 at the toy default
    val_frac: float = 0.1875         # 3/16
    seed: int = 0


@dataclass
class ModelConfig:
    widths: list = field(default_factory=lambda: [16, 32, 64, 64])
    gamma_init: float = 10.0
    seed: int = 0


@dataclass
class LoopConfig:
    batch_size: int = 50
    epochs: int = 30
    lr_schedule: list = field(default_factory=lambda: [[0, 0.1], [23, 0.01], [26, 0.001]])
    momentum: float = 0.9
    weight_decay: float = 5e-4
    independent_unlabeled: bool = False
    seed: int = 0


@dataclass
class BranchConfig:
    few: bool = True
    pat: bool = True
    rot: bool = True
    loc: bool = True
    jig: bool = True
    clu: bool = True

    def enabled(self) -> list[str]:
        return [n for n in ("few", "pat", "rot", "loc", "jig", "clu") if getattr(self, n)]


@dataclass
class AttentionConfig:
    mode: str = "attention"          # attention | sum | manual
    manual_weights: dict | None = None
    sigma_init: float = 0.0
    sigma_lr_scale: float = 1.0


@dataclass
class PretextConfig:
    patch_resize: int = 36           # image 36 -> 12px cells -> 9px crops,
    patch_grid: int = 3              # same 3:4 crop:cell ratio as 24:32
    patch_crop: int = 9
    jitter: bool = True
    color_strength: float = 0.3      # brightness/contrast jitter, patches only
    perm_count: int = 64
    perm_seed: int = 7
    jigsaw_all_perms: bool = False


@dataclass
class GcConfig:
    k: int = 10
    refresh_every: int = 1           # epochs between pseudo-label refreshes
    warmup_epochs: int = 0           # epochs before the first refresh
    lambda_bal: float = 1.0
    steps: int = 10
    lr: float = 0.1
    clip_norm: float = 5.0
    method: str = "gc"               # gc | kmeans
    pool_cap: int = 0                # 0 = use the whole base split


@dataclass
class EvalConfig:
    episodes: int = 2000
    n_way: int = 5
    k_shot: int = 1
    t_query: int = 15
    steps: int = 100
    lr: float = 0.01
    seed: int = 0


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: LoopConfig = field(default_factory=LoopConfig)
    branches: BranchConfig = field(default_factory=BranchConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    pretext: PretextConfig = field(default_factory=PretextConfig)
    gc: GcConfig = field(default_factory=GcConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": LoopConfig,
             "branches": BranchConfig, "attention": AttentionConfig,
             "pretext": PretextConfig, "gc": GcConfig, "eval": EvalConfig}


def _build_section(cls, values: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under '{path}'")
    return cls(**values)


def config_from_dict(raw: dict) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = raw.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"config section '{name}' must be an object")
        sections[name] = _build_section(cls, values, name)
    cfg = TrainConfig(**sections)
    validate_config(cfg)
    return cfg


def validate_config(cfg: TrainConfig) -> None:
    sched = cfg.train.lr_schedule
    if not sched:
        raise ConfigError("train.lr_schedule must not be empty")
    epochs = [e for e, _ in sched]
    rates = [r for _, r in sched]
    if epochs[0] != 0:
        raise ConfigError("train.lr_schedule must start at epoch 0")
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ConfigError(f"train.lr_schedule epochs must be strictly increasing, got {epochs}")
    if any(r <= 0 for r in rates):
        raise ConfigError(f"train.lr_schedule learning rates must be positive, got {rates}")
    if not cfg.branches.enabled():
        raise ConfigError("at least one loss branch must be enabled")
    if cfg.train.batch_size < 1 or cfg.train.epochs < 1:
        raise ConfigError("train.batch_size and train.epochs must be >= 1")
    if cfg.attention.mode not in ("attention", "sum", "manual"):
        raise ConfigError(f"attention.mode must be attention|sum|manual, got {cfg.attention.mode!r}")
    if cfg.attention.mode == "manual":
        required = {"rot", "loc", "jig", "clu"}
        if not cfg.attention.manual_weights or set(cfg.attention.manual_weights) != required:
            raise ConfigError(f"attention.manual_weights must supply exactly {sorted(required)}")
    if cfg.gc.method not in ("gc", "kmeans"):
        raise ConfigError(f"gc.method must be gc|kmeans, got {cfg.gc.method!r}")
    if cfg.gc.k < 2:
        raise ConfigError("gc.k must be >= 2")
    if cfg.pretext.patch_crop > cfg.pretext.patch_resize // cfg.pretext.patch_grid:
        raise ConfigError("pretext.patch_crop exceeds the grid cell size")
    if cfg.eval.n_way < 2 or cfg.eval.k_shot < 1 or cfg.eval.t_query < 1:
        raise ConfigError("eval protocol needs n_way >= 2, k_shot >= 1, t_query >= 1")


def load_config(path: str) -> TrainConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(raw)


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: TrainConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def override_seed(cfg: TrainConfig, seed: int) -> None:
    """CLI --seed: rebases every stream on one root seed."""
    cfg.data.seed = seed
    cfg.model.seed = seed + 1
    cfg.train.seed = seed + 2
    cfg.eval.seed = seed + 3
    cfg.pretext.perm_seed = seed + 4
