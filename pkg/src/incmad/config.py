"""Flat YAML experiment configuration.

One file holds every knob: dataset synthesis, model architecture, objective
weights, training schedule, corruption injections, and output location.
`config init` dumps the defaults; loading validates keys and basic ranges.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .model import ModelSettings

__all__ = ["Config", "load_config", "save_config", "config_hash", "model_settings"]


@dataclass
class Config:
    # experiment
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    setting: str = "6-1 with 4 steps"
    out_dir: str = "runs/exp"
    # data (data_dir empty: synthesize in memory from the data params)
    data_dir: str = ""
    n_objects: int = 10
    per_object_train: int = 16
    per_object_test: int = 8
    image_size: int = 64
    data_seed: int = 0
    # model
    channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    c_fu: int = 64
    d_z: int = 16
    dropout: float = 0.1
    fusion_kind: str = "cross_attention"
    modalities: list = field(default_factory=lambda: ["rgb", "depth"])
    use_mamba: bool = True
    use_ibfm: bool = True
    lambdas: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    jitter_prob: float = 0.5
    train_encoder: bool = True
    ib_head_trainable: bool = False
    use_discriminator: bool = False
    depth_replicate: bool = False
    smooth_sigma: float = 4.0
    # training
    epochs_base: int = 60
    epochs_incremental: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    momentum: float = 0.9
    clip_norm: float | None = None
    reset_optimizer: bool = False
    # corruption injections (applied to training splits before any training)
    redundant_intensity: float = 0.0
    spurious_strength: float = 0.0
    injection_seed: int = 0

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        self.seeds = [int(s) for s in self.seeds]
        self.channels = [int(c) for c in self.channels]
        self.lambdas = [float(v) for v in self.lambdas]
        self.modalities = [str(m) for m in self.modalities]
        if len(self.channels) != 4:
            raise ValueError("channels must list the 4 pyramid widths")
        if len(self.lambdas) != 4:
            raise ValueError("lambdas must list the 4 objective weights")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs_base < 0 or self.epochs_incremental < 0:
            raise ValueError("epoch counts must be non-negative")


def model_settings(cfg: Config, n_objects: int | None = None) -> ModelSettings:
    """ModelSettings for this config; n_objects can follow the dataset."""
    return ModelSettings(
        n_objects=n_objects if n_objects is not None else cfg.n_objects,
        image_size=cfg.image_size,
        channels=tuple(cfg.channels),
        c_fu=cfg.c_fu,
        d_z=cfg.d_z,
        dropout=cfg.dropout,
        fusion_kind=cfg.fusion_kind,
        modalities=tuple(cfg.modalities),
        use_mamba=cfg.use_mamba,
        use_ibfm=cfg.use_ibfm,
        lambdas=tuple(cfg.lambdas),
        jitter_prob=cfg.jitter_prob,
        train_encoder=cfg.train_encoder,
        ib_head_trainable=cfg.ib_head_trainable,
        use_discriminator=cfg.use_discriminator,
        depth_replicate=cfg.depth_replicate,
        smooth_sigma=cfg.smooth_sigma,
    )


def save_config(cfg: Config, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False))


def load_config(path: str | Path) -> Config:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"config {path} must hold a flat key/value mapping")
    known = {f.name for f in dataclasses.fields(Config)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return Config(**raw)


def config_hash(cfg: Config) -> str:
    """Stable short hash of the full configuration."""
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
