"""Flat run configuration shared by the estimator, the trainer and the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml


@dataclass
class TrainConfig:
    # optimisation (defaults follow the published recipe)
    lr_preliminary: float = 0.03
    lr_ultimate_generator: float = 1e-4
    warmup_proportion: float = 0.01
    weight_decay: float = 0.01
    grad_clip: float = 0.1
    batch_size: int = 8
    dropout: float = 0.1
    word_dropout: float = 0.1
    epochs_preliminary: int = 10
    epochs_ult_gen: int = 30
    k: int = 2
    beta: float = 0.55
    delta: float = 0.0
    max_len: int = 256
    seed: int = 42
    # encoder
    encoder: str = "toy"  # "toy" or a Hugging Face model name
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    position_embedding: str = "sinusoidal"  # toy encoder only: "sinusoidal" or "learned"
    share_generator_encoder: bool = False
    # ablations / switches
    use_preliminary: bool = True
    use_ultimate: bool = True
    selector_history: int = 1
    unfreeze_preliminary: bool = False
    # probability of feeding the model's own previous state during training
    scheduled_sampling: float = 0.0
    # weight of the start/end marginal term added to each extractive loss (0 = partition loss only)
    span_marginal_weight: float = 1.0

    def __post_init__(self):
        for name in ("warmup_proportion", "weight_decay", "dropout", "word_dropout", "beta", "scheduled_sampling"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.k < 1 or self.selector_history < 1:
            raise ValueError("k and selector_history must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: dict, strict: bool = True) -> "TrainConfig":
        known = set(cls.field_names())
        unknown = sorted(set(data) - known)
        if unknown and strict:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                continue
            kind = types[key]
            if kind == "bool" and isinstance(value, str):
                value = value.strip().lower() in ("1", "true", "yes", "on")
            elif kind in ("int", "float") and value is not None:
                value = {"int": int, "float": float}[kind](value)
            kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def read_config_file(path) -> dict:
    """Flat key/value YAML (or JSON) file -> dict."""
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a flat mapping")
    nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
    if nested:
        raise ValueError(f"{path}: config must be flat, nested keys: {', '.join(nested)}")
    return data


def write_config(config: TrainConfig, path, extra: dict | None = None) -> None:
    data = config.to_dict()
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
