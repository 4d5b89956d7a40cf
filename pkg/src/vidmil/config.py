"""Run configuration: one nested file drives every command.

Sections map onto the module dataclasses; unknown keys anywhere are
rejected. ``seed`` is mandatory and feeds data generation, splitting and
training unless a section sets its own.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .data import SyntheticDatasetConfig
from .errors import ConfigError, ContractViolation
from .model import ModelConfig
from .training import TrainingConfig


@dataclass
class DataConfig:
    """Synthetic generator settings plus split fractions; ``path`` points at an existing dataset."""

    path: Optional[str] = None
    train_fraction: float = 0.5
    val_fraction: float = 0.1
    num_videos: int = 300
    frames_per_video: int = 30
    num_classes: int = 4
    feature_dim: int = 32
    signal_frame_fraction: float = 0.3
    noise_scale: float = 1.0
    label_density: float = 1.74
    negative_fraction: float = 0.1
    signature_scale: float = 1.0
    block_position: str = "center"
    modality: str = "features"
    image_size: int = 16

    def __post_init__(self):
        self.synthetic(0)
        if not 0 < self.train_fraction < 1 or not 0 < self.val_fraction < 1:
            raise ContractViolation("train_fraction and val_fraction must lie in (0, 1)")

    def synthetic(self, seed: int) -> SyntheticDatasetConfig:
        keys = {f.name for f in fields(SyntheticDatasetConfig)}
        return SyntheticDatasetConfig(seed=seed, **{k: v for k, v in asdict(self).items() if k in keys})


@dataclass
class BackboneConfig:
    kind: str = "synthetic"
    output_dim: int = 32
    resize: tuple = (8, 8)
    weights: str = "imagenet"
    input_size: int = 224
    trainable: bool = False

    def __post_init__(self):
        self.resize = tuple(int(r) for r in self.resize)
        if self.kind not in ("synthetic", "resnet50"):
            raise ContractViolation(f"unknown backbone kind {self.kind!r}")

    def extractor_kwargs(self, seed: int) -> dict:
        if self.kind == "synthetic":
            return {"output_dim": self.output_dim, "resize": tuple(self.resize), "seed": seed}
        return {"weights": self.weights, "input_size": self.input_size, "trainable": self.trainable}


@dataclass
class EvaluationConfig:
    top_k: int = 3
    seeds: Optional[list] = None


@dataclass
class OutputConfig:
    out_dir: str = "runs"


@dataclass
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        self.training.seed = self.seed

    def to_dict(self) -> dict:
        d = json.loads(json.dumps(asdict(self)))
        del d["training"]["seed"]  # always the run seed
        return d

    def hash(self) -> str:
        return _digest(self.to_dict())

    def data_hash(self) -> str:
        """Hash of what determines the dataset: data and backbone sections plus seed."""
        d = self.to_dict()
        return _digest({"seed": d["seed"], "data": d["data"], "backbone": d["backbone"]})

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return config_from_dict(raw)

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = int(seed)
        return RunConfig.from_dict(d)


SECTIONS = {
    "data": DataConfig,
    "backbone": BackboneConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "evaluation": EvaluationConfig,
    "output": OutputConfig,
}


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def _section(cls, values, name):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = {f.name for f in fields(cls)}
    if name == "training":
        allowed.discard("seed")
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (ContractViolation, TypeError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = sorted(set(raw) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "seed" not in raw or raw["seed"] is None:
        raise ConfigError("'seed' is mandatory")
    try:
        seed = int(raw["seed"])
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {raw['seed']!r}") from None
    sections = {name: _section(cls, raw.get(name), name) for name, cls in SECTIONS.items()}
    return RunConfig(seed=seed, **sections)


def load_config(path, seed: Optional[int] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    raw = raw or {}
    if seed is not None:
        raw["seed"] = seed
    return config_from_dict(raw)
