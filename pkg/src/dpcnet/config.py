"""JSON run configuration: model, train, data and infer sections."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from .data import FOREGROUND_FRACTION, PATCH_SIZE, TARGET_SPACING
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    target_spacing: Tuple[float, float, float] = TARGET_SPACING
    patch_size: Tuple[int, int, int] = PATCH_SIZE
    augment: bool = True
    foreground_fraction: float = FOREGROUND_FRACTION


@dataclass
class InferConfig:
    overlap: float = 0.5
    save_probs: bool = False


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 2
    iterations_per_epoch: int = 25
    seed: int = 0
    val_patches: int = 4
    out_dir: str = "run"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataConfig = field(default_factory=DataConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    base_dir: Path = Path(".")

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            learning_rate=t.learning_rate,
            epochs=t.epochs,
            batch_size=t.batch_size,
            iterations_per_epoch=t.iterations_per_epoch,
            patch_size=self.data.patch_size,
            seed=t.seed,
            foreground_fraction=self.data.foreground_fraction,
            augment=self.data.augment,
            val_patches=t.val_patches,
        )

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


_SECTIONS = {"model": ModelConfig, "train": TrainSection, "data": DataConfig, "infer": InferConfig}
_TUPLES = {"target_spacing": float, "patch_size": int}


def _section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    kwargs = dict(raw)
    for k, conv in _TUPLES.items():
        if k in kwargs:
            v = kwargs[k]
            if not isinstance(v, list) or len(v) != 3:
                raise ConfigError(f"{name}.{k} must be a list of three numbers")
            kwargs[k] = tuple(conv(x) for x in v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from None


def parse_config(raw: dict, base_dir=".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {name: _section(name, cls, raw.get(name, {})) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(**parts, base_dir=Path(base_dir))  # type: ignore[arg-type]
    if cfg.infer.overlap != 0.5:
        raise ConfigError("only half-patch overlap (0.5) is supported")
    if any(p % 2**(cfg.model.levels - 1) for p in cfg.data.patch_size):
        raise ConfigError(f"patch_size {cfg.data.patch_size} must be divisible by {2**(cfg.model.levels - 1)}")
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return parse_config(raw, path.parent)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        d = dataclasses.asdict(getattr(cfg, name))
        out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    return out
