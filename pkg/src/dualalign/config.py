"""Flat JSON run configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .alignment import DEFAULT_TEMPLATE, PRESETS, TrainConfig
from .dataset import DEFAULT_RATIOS, DEFAULT_VOCAB_SIZE
from .encoders import MODES
from .errors import ConfigError


@dataclass
class RunConfig:
    manifest: str | None = None
    split_ratios: list = field(default_factory=lambda: list(DEFAULT_RATIOS))
    d_in: int | None = None  # None: taken from the feature files
    h: int = 256
    d_v: int = 768
    d_t: int = 512
    n: int = 512
    image_mode: str = "toy"
    text_mode: str = "toy"
    vocab_size: int = DEFAULT_VOCAB_SIZE
    preset: str = "paper"
    learning_rate: float | None = None  # None: from preset
    batch_size: int | None = None
    epochs: int | None = None
    optimizer: str = "adam"
    seed: int = 0
    template: str = DEFAULT_TEMPLATE
    classes: list | None = None  # None: labels in order of first appearance
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        for key in ("h", "d_v", "d_t", "n", "vocab_size"):
            v = getattr(self, key)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if self.d_in is not None and (not isinstance(self.d_in, int) or self.d_in < 1):
            raise ConfigError(f"d_in must be a positive integer, got {self.d_in!r}")
        for key in ("image_mode", "text_mode"):
            if getattr(self, key) not in MODES:
                raise ConfigError(f"{key} must be one of {MODES}")
        if "{CLS}" not in self.template:
            raise ConfigError("template needs a {CLS} placeholder")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if len(self.split_ratios) != 3:
            raise ConfigError("split_ratios needs three numbers")
        self.train_config()  # raises ConfigError on bad optimizer fields

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_preset(
            self.preset,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            optimizer=self.optimizer,
        )

    def resolved(self) -> dict:
        """All keys with preset-dependent values filled in."""
        out = asdict(self)
        tc = self.train_config()
        out.update(learning_rate=tc.learning_rate, batch_size=tc.batch_size, epochs=tc.epochs)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> "RunConfig":
        data = asdict(self)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)
