"""Flat key-value run configuration (YAML syntax, one level deep).

Keys mirror the training-setup table: optimizer settings, patch geometry,
loss, multilabel flag, warmup, spectrogram size, SpecAugment widths, mixup,
epochs, schedule, normalization statistics and base LR, plus model and
frontend sizes. Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .encoder import ConfigError, ModelConfig
from .features import FeatureConfig
from .training import TrainConfig

_FEATURE_KEYS = {f.name for f in fields(FeatureConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
# geometry shared with the feature frontend is taken from there
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"n_mels", "target_frames", "patch_size"}
_OTHER_KEYS = {"optimizer"}


@dataclass
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_flat(self) -> dict:
        flat = {"optimizer": "adam"}
        flat.update(asdict(self.features))
        flat.update({k: v for k, v in self.model.to_dict().items() if k in _MODEL_KEYS})
        flat.update(asdict(self.train))
        return dict(sorted(flat.items()))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True).encode()).hexdigest()

    @property
    def seed(self) -> int:
        return self.train.seed


def from_flat(flat: dict) -> RunConfig:
    if not isinstance(flat, dict):
        raise ConfigError("config must be a flat mapping of key: value")
    unknown = set(flat) - _FEATURE_KEYS - _TRAIN_KEYS - _MODEL_KEYS - _OTHER_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    nested = [k for k, v in flat.items() if isinstance(v, (dict, list))]
    if nested:
        raise ConfigError(f"config must be flat; nested values under {nested}")
    if str(flat.get("optimizer", "adam")).lower() != "adam":
        raise ConfigError(f"only the adam optimizer is supported, got {flat['optimizer']!r}")
    try:
        feats = FeatureConfig(**{k: v for k, v in flat.items() if k in _FEATURE_KEYS})
        model = ModelConfig(
            **{k: v for k, v in flat.items() if k in _MODEL_KEYS},
            n_mels=feats.n_mels, target_frames=feats.target_frames, patch_size=feats.patch_size,
        )
        train = TrainConfig(**{k: v for k, v in flat.items() if k in _TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(feats, model, train)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        flat = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_flat(flat)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_flat(), sort_keys=True)
