"""Training configuration and its YAML file form.

Unknown keys anywhere in the file are errors, so a typo never silently
falls back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .transformer import ConfigError, TransformerConfig

STAGES = ("teacher-mlm", "teacher-finetune", "general", "task-intermediate", "task-prediction")
OBJECTIVES = ("embd", "attn", "hidn", "pred")


@dataclass
class DataConfig:
    train: str | None = None
    dev: str | None = None
    corpus: str | None = None
    vocab: str | None = None
    vocab_words: int = 40
    num_classes: int = 2


@dataclass
class CheckpointConfig:
    init: str | None = None
    teacher: str | None = None
    out: str = "model"


@dataclass
class TrainConfig:
    stage: str
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup: float = 0.1
    clip: float | None = 1.0
    max_len: int = 64
    seed: int = 0
    mapping: str | list[int] = "uniform"
    lambdas: list[float] | None = None
    temperature: float = 1.0
    objectives: list[str] | None = None
    identity_projections: bool = False
    share_hidden_projection: bool = False
    mlm_probability: float = 0.15
    hard_labels: bool = False
    model: TransformerConfig | None = None
    data: DataConfig = field(default_factory=DataConfig)
    checkpoints: CheckpointConfig = field(default_factory=CheckpointConfig)

    def validate(self) -> "TrainConfig":
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.warmup < 1:
            raise ConfigError(f"warmup must be in [0, 1), got {self.warmup}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.lambdas is not None and any(v < 0 for v in self.lambdas):
            raise ConfigError(f"lambdas must be non-negative, got {self.lambdas}")
        for o in self.objectives or ():
            if o not in OBJECTIVES:
                raise ConfigError(f"unknown objective {o!r}; choose from {OBJECTIVES}")
        if self.stage == "general" and "pred" in (self.objectives or ()):
            raise ConfigError("general distillation does not use the prediction objective")
        if not 0 < self.mlm_probability < 1:
            raise ConfigError(f"mlm_probability must be in (0, 1), got {self.mlm_probability}")
        if self.model is not None:
            self.model.validate()
        return self

    def active_objectives(self) -> tuple[str, ...]:
        if self.objectives is not None:
            return tuple(self.objectives)
        return {
            "general": ("embd", "attn", "hidn"),
            "task-intermediate": ("embd", "attn", "hidn"),
            "task-prediction": ("pred",),
        }.get(self.stage, ())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}")
    nested = {"model": TransformerConfig, "data": DataConfig, "checkpoints": CheckpointConfig}
    kwargs = {}
    for key, value in raw.items():
        if cls is TrainConfig and key in nested and value is not None:
            value = _build(nested[key], value, key)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def from_dict(raw: dict) -> TrainConfig:
    if "stage" not in (raw or {}):
        raise ConfigError("config lacks required key 'stage'")
    return _build(TrainConfig, raw, "").validate()


def load_config(path) -> TrainConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return from_dict(raw or {})


def dump_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
