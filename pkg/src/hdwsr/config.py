"""Run configuration: nested dataclasses, YAML files and dotted overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .model import GUIDANCE_MODES, SAMPLING_MODES, ModelConfig
from .presr import PRESR_MODES


@dataclass
class OptimConfig:
    lr: float = 1e-4
    iterations: int = 1000
    batch_size: int = 4
    checkpoint_every: int = 500
    log_every: int = 10


@dataclass
class DataConfig:
    train_dir: str | None = None
    eval_dir: str | None = None
    patch: int = 64
    scale: int = 4
    presr: str = "bicubic"
    presr_path: str | None = None
    presr_trainable: bool = False


@dataclass
class AblationConfig:
    attention: str = "dtb"  # dtb | topk | dense | self-only
    topk: int | None = None  # None means half the key count
    sampling: str = "dwt"  # dwt | strided-conv
    guidance: str = "he-net"  # he-net | ha-net-self | none


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        step = self.data.scale * 2**self.model.levels
        if self.data.patch % step:
            raise ConfigError(f"patch {self.data.patch} must be divisible by scale * 2**levels = {step}")
        if self.data.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.data.scale}")
        if self.data.presr not in PRESR_MODES:
            raise ConfigError(f"unknown presr mode {self.data.presr!r}")
        if self.ablation.attention not in ("dtb", "topk", "dense", "self-only"):
            raise ConfigError(f"unknown attention ablation {self.ablation.attention!r}")
        if self.ablation.sampling not in SAMPLING_MODES:
            raise ConfigError(f"unknown sampling ablation {self.ablation.sampling!r}")
        if self.ablation.guidance not in GUIDANCE_MODES:
            raise ConfigError(f"unknown guidance ablation {self.ablation.guidance!r}")
        if self.optim.lr <= 0 or self.optim.iterations < 0 or self.optim.batch_size < 1:
            raise ConfigError("optim.lr must be > 0, iterations >= 0, batch_size >= 1")
        return self

    def check_paths(self) -> "RunConfig":
        """Every configured path must exist; called when loading from a file."""
        for key in ("train_dir", "eval_dir", "presr_path"):
            value = getattr(self.data, key)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"data.{key}: {value} does not exist")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"model": ModelConfig, "optim": OptimConfig, "data": DataConfig, "ablation": AblationConfig}
        kwargs = {}
        for key, value in (d or {}).items():
            if key in sections:
                known = {f.name for f in dataclasses.fields(sections[key])}
                unknown = set(value or {}) - known
                if unknown:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
                kwargs[key] = sections[key](**(value or {}))
            elif key in ("seed", "out_dir"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh)).check_paths()

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Apply ``{"model.base_channels": 8, "seed": 3}``-style overrides."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            *parents, leaf = dotted.split(".")
            node = d
            for p in parents:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config section {dotted!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[leaf] = value
        return RunConfig.from_dict(d)


def leaf_keys(cfg: RunConfig | None = None) -> list[str]:
    """Dotted names of every leaf field, e.g. ``model.levels``."""
    d = (cfg or RunConfig()).to_dict()
    keys = []
    for k, v in d.items():
        if isinstance(v, dict):
            keys.extend(f"{k}.{sub}" for sub in v)
        else:
            keys.append(k)
    return keys


def parse_value(text: str) -> Any:
    """Interpret a CLI string the way YAML would (``[2,4,4]``, ``1e-4``, ``null``)."""
    value = yaml.safe_load(text)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value
