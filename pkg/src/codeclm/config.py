"""Run configuration: nested frozen dataclasses loaded from JSON.

Unknown keys are rejected at every level so that a typo in a config file
fails loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .sampling import SamplingConfig
from .world import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 4
    max_text_len: int = 64
    max_code_len: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 3e-3
    warmup_steps: int = 500
    total_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 16
    grad_clip: float = 1.0
    log_every: int = 500


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2000
    train_len: tuple[int, int] = (6, 24)
    eval_per_speaker: int = 10
    eval_len: tuple[int, int] = (6, 12)
    prompt_frames: int = 12
    # NAR acoustic-condition length is drawn from this frame range, capped at T // 2
    cond_frames: tuple[int, int] = (4, 32)
    val_size: int = 16
    # re-voice AR training utterances with a random speaker offset (held-out offsets excluded)
    offset_augment: bool = True


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplingConfig = field(default_factory=lambda: SamplingConfig(top_p=0.5))
    group_sizes: tuple[int, ...] = (1, 2)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}.{name}")
        elif typing.get_origin(hint) is tuple:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
