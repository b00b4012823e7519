"""Run configuration: one flat dataclass, read from ``key=value`` files.

Blank lines and ``#`` comments are ignored, tuples are comma separated, and
unknown keys are rejected. Command-line ``--set key=value`` overrides are
applied after the file.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable

from .data import SyntheticSpec
from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    base_channels: int = 32
    stage_depths: tuple[int, ...] = (2, 4, 2, 2)
    state_size: int = 8
    num_classes: int = 2
    image_size: int = 64
    dilation_schedule: tuple[int, ...] = (1, 2, 3, 1)
    conv_variant: str = "both"
    expand: int = 6
    head_upsample: str = "bilinear"
    # loss
    w_miou: float = 0.4
    w_dice: float = 0.4
    w_boundary: float = 0.2
    # optimisation
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 20
    batch_size: int = 8
    flip: bool = True
    # data and bookkeeping
    num_images: int = 200
    noise: float = 0.05
    data_dir: str = "data/synthetic"
    out_dir: str = "runs/desk"
    seed: int = 0
    threads: int = 1

    def model_config(self) -> ModelConfig:
        return ModelConfig(base_channels=self.base_channels, stage_depths=self.stage_depths,
                           state_size=self.state_size, num_classes=self.num_classes,
                           input_size=(self.image_size, self.image_size),
                           dilation_schedule=self.dilation_schedule,
                           conv_variant=self.conv_variant, expand=self.expand,
                           head_upsample=self.head_upsample)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_miou, self.w_dice, self.w_boundary)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(image_size=self.image_size, num_images=self.num_images,
                             num_classes=self.num_classes, noise=self.noise, seed=self.seed)

    def validate(self) -> "RunConfig":
        """Check cross-field constraints by building every derived config."""
        self.model_config()
        self.loss_weights()
        if self.epochs < 1 or self.batch_size < 1 or self.threads < 1:
            raise ConfigError("epochs, batch_size and threads must be >= 1")
        if not 0 < self.min_lr <= self.lr:
            raise ConfigError(f"need 0 < min_lr <= lr, got min_lr={self.min_lr}, lr={self.lr}")
        return self

    def to_items(self) -> dict[str, str]:
        return {f.name: _format(getattr(self, f.name)) for f in fields(self)}

    def with_overrides(self, items: dict[str, str]) -> "RunConfig":
        return replace(self, **{k: _parse_value(k, v) for k, v in items.items()})

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "RunConfig":
        return cls().with_overrides(items)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def _parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_assignments(lines: Iterable[str], source: str = "<override>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    items = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        items.update(parse_assignments(p.read_text().splitlines(), str(p)))
    items.update(parse_assignments(overrides, "--set"))
    return RunConfig.from_items(items).validate()
