"""Run configuration: model, training and synthetic-world settings.

Configs are nested JSON objects with sections ``model``, ``train`` and
``world``. Unknown keys are rejected. Named presets: ``default`` (published
hyperparameters), ``desk`` (small model used on the synthetic world) and
``tiny`` (gradient checks).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the first offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    backbone_channels: tuple = (16, 32, 64, 64)
    backbone_strides: tuple = (2, 2, 2, 2)
    cwt_blocks: int = 4
    heads: int = 4
    rate: int = 2
    k_n: int = 10
    lambda_c: float = 0.5
    mlp_ratio: int = 2
    split: int | None = None
    clusters: int = 64
    expansion: int = 2
    groups: int = 8
    gem_p: float = 3.0
    sharpness: float = 10.0
    out_dim: int = 4096

    @property
    def channels(self) -> int:
        return self.backbone_channels[-1]

    @property
    def descriptor_dim(self) -> int:
        return self.expansion * self.channels * self.clusters // self.groups

    def validate(self) -> None:
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ConfigError("model.backbone_strides", "length must match backbone_channels")
        if self.cwt_blocks < 1:
            raise ConfigError("model.cwt_blocks", "need at least one block")
        split = self.split if self.split is not None else self.channels // 2
        if self.split is None and self.channels % 2:
            raise ConfigError("model.split", "odd channel count needs an explicit split")
        if (self.channels - split) % self.heads:
            raise ConfigError("model.heads", "must divide the global-branch channel count")
        if (self.expansion * self.channels) % self.groups:
            raise ConfigError("model.groups", "must divide expansion * channels")
        if self.lambda_c < 0:
            raise ConfigError("model.lambda_c", "must be non-negative")
        if self.gem_p <= 0:
            raise ConfigError("model.gem_p", "must be positive")
        if self.out_dim < 1 or self.clusters < 1 or self.k_n < 1:
            raise ConfigError("model", "out_dim, clusters and k_n must be positive")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 4
    negatives: int = 10
    pos_radius: float = 10.0
    neg_radius: float = 25.0
    pool: int = 500
    generations: int = 5
    epochs: int = 8
    temperatures: tuple = (0.06, 0.06, 0.06, 0.06, 0.06)
    lambda_s: float = 0.55
    k_pos: int = 4
    eval_threshold: float = 25.0
    gallery_queries: bool = False
    grad_clip: float | None = None
    seed: int = 7

    def temperature(self, generation: int) -> float:
        t = self.temperatures
        return float(t[min(generation, len(t) - 1)])

    def validate(self) -> None:
        if self.generations < 1:
            raise ConfigError("train.generations", "need at least one generation")
        if self.epochs < 1:
            raise ConfigError("train.epochs", "need at least one epoch")
        if not self.temperatures or any(t <= 0 for t in self.temperatures):
            raise ConfigError("train.temperatures", "all temperatures must be positive")
        if self.lambda_s < 0:
            raise ConfigError("train.lambda_s", "must be non-negative")
        if self.pos_radius <= 0 or self.neg_radius <= 0:
            raise ConfigError("train.pos_radius", "radii must be positive")
        if self.pool < self.negatives:
            raise ConfigError("train.pool", "candidate pool smaller than negative count")
        if self.negatives < 1:
            raise ConfigError("train.negatives", "need at least one negative")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("train.lr", "learning rate and weight decay must be non-negative")


@dataclass
class WorldSpec:
    seed: int = 7
    places: int = 25
    spacing: float = 60.0
    variants: int = 12
    image_size: int = 64
    gain_range: tuple = (0.6, 1.4)
    max_occlusions: int = 2
    max_occlusion_frac: float = 0.25
    jitter: float = 5.0
    max_shift: int = 8
    gallery_frac: float = 0.5
    train_query_frac: float = 0.25

    def validate(self, neg_radius: float = 25.0, pos_radius: float = 10.0) -> None:
        if self.spacing <= 2 * neg_radius:
            raise ConfigError("world.spacing", f"must exceed twice the negative radius ({2 * neg_radius} m)")
        if not 0 <= self.jitter <= pos_radius / 2:
            raise ConfigError("world.jitter", "jitter must keep same-place variants within the positive radius")
        if not 0 < self.max_occlusion_frac <= 0.25:
            raise ConfigError("world.max_occlusion_frac", "must lie in (0, 0.25]")
        if self.gallery_frac <= 0 or self.train_query_frac < 0 or self.gallery_frac + self.train_query_frac >= 1:
            raise ConfigError("world.gallery_frac", "split fractions must leave a held-out query share")
        if self.places < 1 or self.variants < 3:
            raise ConfigError("world.variants", "need at least one place and three variants")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    world: WorldSpec = field(default_factory=WorldSpec)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.world.validate(self.train.neg_radius, self.train.pos_radius)
        return self

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train), "world": asdict(self.world)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "world": WorldSpec}

_PRESETS = {
    "default": {},
    "desk": {
        "model": {
            "backbone_channels": [8, 16, 32, 32],
            "backbone_strides": [2, 2, 2, 1],
            "cwt_blocks": 4,
            "heads": 4,
            "clusters": 16,
            "sharpness": 1.0,
            "out_dim": 64,
        },
        "train": {"lr": 0.001, "batch_size": 4, "pool": 20},
    },
    "tiny": {
        "model": {
            "backbone_channels": [4, 8],
            "backbone_strides": [2, 1],
            "cwt_blocks": 2,
            "heads": 2,
            "k_n": 3,
            "clusters": 3,
            "groups": 4,
            "out_dim": 8,
        },
        "train": {"negatives": 2, "k_pos": 1, "batch_size": 1},
        "world": {"places": 4, "variants": 4, "image_size": 16, "max_shift": 2},
    },
}


def _merge_section(name: str, cls, base, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(name, "section must be an object")
    known = {f.name for f in fields(cls)}
    updates = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        current = getattr(base, key)
        if isinstance(current, tuple) or isinstance(value, list):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}.{key}", "expected a list")
            value = tuple(value)
        updates[key] = value
    return replace(base, **updates)


def from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be an object")
    for key in data:
        if key not in _SECTIONS:
            raise ConfigError(key, "unknown section")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _merge_section(name, cls, getattr(cfg, name), data.get(name, {}))
    return RunConfig(**sections).validate()


def preset(name: str) -> RunConfig:
    if name not in _PRESETS:
        raise ConfigError(name, f"unknown preset (choose from {', '.join(_PRESETS)})")
    return from_dict(_PRESETS[name])


def load_config(spec: str | Path) -> RunConfig:
    """Load a preset name or a JSON file; a file may name a ``"preset"`` to extend."""
    if str(spec) in _PRESETS:
        return preset(str(spec))
    path = Path(spec)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(str(spec), "no such preset or file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(str(spec), f"invalid JSON ({exc})") from None
    base = RunConfig()
    if isinstance(data, dict) and "preset" in data:
        data = dict(data)
        base = preset(data.pop("preset"))
    return from_dict(data, base)
