"""Run configuration: dataclass sections, strict YAML parsing and serialization."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .contrastive import ContrastiveConfig
from .errors import ConfigError
from .model import ModelConfig

METHODS = ("first_order", "cap_f", "movement", "cap_m", "soft_movement", "cap_soft", "magnitude")
CAP_METHODS = ("cap_f", "cap_m", "cap_soft")
CRITERION = {
    "first_order": "first_order",
    "cap_f": "first_order",
    "movement": "movement",
    "cap_m": "movement",
    "soft_movement": "soft_movement",
    "cap_soft": "soft_movement",
    "magnitude": "magnitude",
}
BASELINE_OF = {"cap_f": "first_order", "cap_m": "movement", "cap_soft": "soft_movement"}
OUTPUT_ROOT_ENV = "CAPPRUNE_OUTPUT_ROOT"


@dataclass
class DataConfig:
    kind: str = "synthetic"
    family: str = "pair"
    n_examples: int = 2000
    n_classes: int = 2
    seed: int | None = None
    train_path: str | None = None
    dev_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "tsv"):
            raise ConfigError(f"unknown data kind {self.kind!r}", "data.kind")
        if self.kind == "synthetic" and self.family not in ("keyword", "pair", "prefix"):
            raise ConfigError(f"unknown family {self.family!r}", "data.family")
        if self.kind == "tsv" and not (self.train_path and self.dev_path):
            raise ConfigError("tsv data needs train_path and dev_path", "data.train_path")
        if self.n_examples < 1:
            raise ConfigError("must be >= 1", "data.n_examples")


@dataclass
class ScheduleConfig:
    step_fraction: float = 10.0
    warmup_epochs: float = 1.0
    ramp_epochs: float = 6.0
    cooldown_epochs: float = 2.0
    retrain_epochs: float = 2.0
    initial_sparsity: float = 0.0
    crossings: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])

    def __post_init__(self):
        for name in ("warmup_epochs", "cooldown_epochs", "retrain_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", f"schedule.{name}")
        if not self.ramp_epochs > 0:
            raise ConfigError("must be > 0", "schedule.ramp_epochs")
        if not self.step_fraction > 0:
            raise ConfigError("must be > 0", "schedule.step_fraction")
        if not 0 <= self.initial_sparsity < 100:
            raise ConfigError("must be in [0, 100)", "schedule.initial_sparsity")


@dataclass
class LossWeights:
    ce: float = 1.0
    prc: float = 1.0
    snc: float = 1.0
    fic: float = 1.0
    kd_weight: float = 0.0
    kd_temperature: float = 2.0

    def __post_init__(self):
        for name in ("ce", "prc", "snc", "fic", "kd_weight"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", f"loss.{name}")
        if not self.ce > 0:
            raise ConfigError("cross-entropy weight must be > 0", "loss.ce")
        if not self.kd_temperature > 0:
            raise ConfigError("must be > 0", "loss.kd_temperature")


@dataclass
class PruningConfig:
    topk_scope: str = "local"
    score_lr: float = 1e-2
    threshold: float = 0.0
    regularizer_weight: float = 1e-2
    keep_last_head: bool = True
    importance_batches: int = 8
    abs_order: str = "inside"

    def __post_init__(self):
        if self.topk_scope not in ("local", "global"):
            raise ConfigError(f"unknown scope {self.topk_scope!r}", "pruning.topk_scope")
        if self.abs_order not in ("inside", "outside"):
            raise ConfigError(f"unknown abs_order {self.abs_order!r}", "pruning.abs_order")
        if self.regularizer_weight < 0:
            raise ConfigError("must be >= 0", "pruning.regularizer_weight")
        if self.importance_batches < 1:
            raise ConfigError("must be >= 1", "pruning.importance_batches")


@dataclass
class TrainingConfig:
    batch_size: int = 32
    lr: float = 5e-4
    pretrain_steps: int = 1000
    pretrain_lr: float = 1e-3
    finetune_epochs: float = 3.0
    student_init: str = "pretrained"
    eval_every: int = 50
    bank_corpus_limit: int = 8192
    drop_snapshot_weights: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "training.batch_size")
        if not self.lr > 0:
            raise ConfigError("must be > 0", "training.lr")
        if self.student_init not in ("pretrained", "finetuned"):
            raise ConfigError(f"unknown student_init {self.student_init!r}", "training.student_init")
        if self.finetune_epochs < 0 or self.pretrain_steps < 0:
            raise ConfigError("must be >= 0", "training.finetune_epochs")
        if self.eval_every < 1:
            raise ConfigError("must be >= 1", "training.eval_every")


@dataclass
class TeacherConfig:
    pretrained_path: str | None = None
    finetuned_path: str | None = None


@dataclass
class RunConfig:
    method: str = "cap_m"
    target_sparsity: float = 90.0
    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    teachers: TeacherConfig = field(default_factory=TeacherConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}", "method")
        if not 0 < self.target_sparsity < 100:
            raise ConfigError(f"must be in (0, 100), got {self.target_sparsity}", "target_sparsity")

    @property
    def criterion(self) -> str:
        return CRITERION[self.method]

    @property
    def schedule_kind(self) -> str:
        return "milestones" if self.criterion == "first_order" else "cubic"

    @property
    def is_cap(self) -> bool:
        return self.method in CAP_METHODS

    def effective_loss(self) -> LossWeights:
        """Loss weights actually used: plain pruning methods drop every contrastive term."""
        if self.is_cap:
            return self.loss
        return dataclasses.replace(self.loss, prc=0.0, snc=0.0, fic=0.0)

    def resolved_output_dir(self) -> Path:
        path = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not path.is_absolute():
            path = Path(root) / path
        return path


# ---------------------------------------------------------------------------
# dict <-> dataclass


def _build(cls, data: Any, prefix: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", prefix or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        key = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise ConfigError("unknown key", key)
    kwargs = {}
    for name, value in data.items():
        key = f"{prefix}.{name}" if prefix else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, key)
        else:
            kwargs[name] = _coerce(hint, value, key)
    # section __post_init__ validators raise with the full dotted key already
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), prefix or "<root>") from None


def _coerce(hint, value, key):
    args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError("must not be null", key)
    if args and type(None) in args:
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError("expected a list", key)
        (item,) = typing.get_args(hint)
        return [_coerce(item, v, key) for v in value]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    return value


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def parse_config(document: str | dict | None) -> RunConfig:
    """Parse a YAML (or JSON) document. Unknown keys are errors; missing keys take defaults."""
    if isinstance(document, dict) or document is None:
        return config_from_dict(document)
    try:
        data = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not a valid YAML document: {exc}") from None
    return config_from_dict(data)


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Return a copy with dotted-key overrides (``{"contrastive.temperature": 0.2}``) applied."""
    data = config_to_dict(cfg)
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError("unknown key", dotted)
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError("unknown key", dotted)
        node[parts[-1]] = value
    return config_from_dict(data)


def flat_keys(cfg: RunConfig | None = None) -> dict[str, Any]:
    """Dotted key -> default value for every leaf field."""
    out = {}

    def walk(d, prefix):
        for k, v in d.items():
            key = f"{prefix}.{k}" if prefix else k
            if isinstance(v, dict):
                walk(v, key)
            else:
                out[key] = v

    walk(config_to_dict(cfg or RunConfig()), "")
    return out


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved"
    path.write_text(serialize_config(cfg))
    return path
