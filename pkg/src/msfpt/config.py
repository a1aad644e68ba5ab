"""Model, scale and training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

from .errors import ConfigError

# Working scales in their fixed processing order.
DEFAULT_SCALES: tuple[float, ...] = (1.0, 2.0, 3.0, 0.5)

# Native feature sizes of the reference (Inception) backbone at 192x192 input.
# Metadata only: interpolation to the canonical grid removes the dependency.
REFERENCE_FEATURE_SIZES: dict[float, int] = {1.0: 21, 2.0: 15, 3.0: 9, 0.5: 33}

N_BLOCKS = 6


def parse_scale(value) -> float:
    try:
        s = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad scale {value!r}") from None
    if s not in DEFAULT_SCALES:
        raise ConfigError(f"unknown scale {value!r}; expected one of 1, 2, 3, 0.5")
    return s


def parse_scales(text: str) -> tuple[float, ...]:
    scales = tuple(parse_scale(p) for p in text.split(",") if p.strip())
    if not scales:
        raise ConfigError("empty scale list")
    if len(set(scales)) != len(scales):
        raise ConfigError(f"duplicate scales in {text!r}")
    return scales


def scale_key(s: float) -> str:
    """Parameter-name prefix for a scale: 1 -> 'scale1', 0.5 -> 'scale05'."""
    s = parse_scale(s)
    return "scale05" if s == 0.5 else f"scale{int(s)}"


def scale_label(s: float) -> str:
    return "0.5" if s == 0.5 else str(int(s))


@dataclass(frozen=True)
class ScaleSet:
    scales: tuple[float, ...] = DEFAULT_SCALES
    target: tuple[int, int] = (21, 21)

    def __post_init__(self):
        scales = tuple(parse_scale(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))
        if not scales or len(set(scales)) != len(scales):
            raise ConfigError("scales must be non-empty and distinct")
        if min(self.target) < 1 or len(self.target) != 2:
            raise ConfigError(f"bad target size {self.target}")

    def reference_size(self, s: float) -> int:
        return REFERENCE_FEATURE_SIZES[parse_scale(s)]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_mlp: int = 256
    grid: tuple[int, int] = (7, 7)
    scales: tuple[float, ...] = DEFAULT_SCALES
    block_channels: int = 32
    head_hidden: int | None = None
    mlp_activation: str = "relu"
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "scales", tuple(parse_scale(s) for s in self.scales))
        self.validate()

    def validate(self) -> None:
        if self.d_model < 1 or self.n_heads < 1 or self.d_mlp < 1 or self.block_channels < 1:
            raise ConfigError("widths and head counts must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError(f"bad grid {self.grid}")
        if self.head_hidden is not None and self.head_hidden < 1:
            raise ConfigError("head_hidden must be positive")
        if self.mlp_activation not in ("relu",):
            raise ConfigError(f"unsupported mlp_activation {self.mlp_activation!r}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        ScaleSet(self.scales, self.grid)

    @property
    def n_grid(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_grid

    @property
    def channels(self) -> int:
        return N_BLOCKS * self.block_channels

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.d_model

    @property
    def scale_set(self) -> ScaleSet:
        return ScaleSet(self.scales, self.grid)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(d_model=128, n_layers=2, n_heads=4, d_mlp=512, grid=(21, 21), block_channels=320)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["grid"] = list(self.grid)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    lr: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    patch_size: int = 192
    seed: int = 0
    augment: bool = True
    log_every: int = 10

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patch_size < 32:
            raise ConfigError("patch_size must be >= 32")
        if self.weight_decay < 0 or self.adam_eps <= 0 or self.log_every < 1:
            raise ConfigError("bad weight_decay / adam_eps / log_every")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        if "total_steps" not in d:
            raise ConfigError("train config needs total_steps")
        return cls(**d)
