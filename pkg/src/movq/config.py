"""Flat ``key = value`` run configuration shared by both training stages."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .autoencoder import AutoencoderConfig
from .errors import ConfigurationError
from .prior import PriorConfig

STAGES = ("vq", "prior_mask", "prior_auto")


@dataclass
class TrainConfig:
    dataset: str = "builtin:shapes"
    dataset_size: int = 200
    holdout: int = 0
    image_size: int = 32
    f: int = 8
    n_z: int = 64
    c: int = 4
    K: int = 64
    beta: float = 0.25
    batch_size: int = 16
    lr: float = 1e-4
    steps: int = 2000
    seed: int = 0
    initial_feature_kind: str = "fourier"
    adversarial: bool = False
    adversarial_weight: float = 0.1
    stage: str = "vq"
    base_width: int = 64
    channel_mult: tuple[int, ...] = ()
    num_res_blocks: int = 2
    scn_blocks: int = 3
    prior_layers: int = 8
    prior_heads: int = 8
    prior_embed_dim: int = 256
    prior_hidden_dim: int = 1024
    num_classes: int = 0
    checkpoint_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.n_z % self.c:
            raise ConfigurationError(f"n_z={self.n_z} is not divisible by c={self.c}")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch_size must be positive and steps non-negative")
        self.channel_mult = tuple(int(m) for m in self.channel_mult)

    def autoencoder(self) -> AutoencoderConfig:
        return AutoencoderConfig(
            image_size=self.image_size,
            f=self.f,
            n_z=self.n_z,
            chunks=self.c,
            num_codes=self.K,
            base_width=self.base_width,
            channel_mult=self.channel_mult,
            num_res_blocks=self.num_res_blocks,
            scn_blocks=self.scn_blocks,
            initial_feature_kind=self.initial_feature_kind,
            feature_seed=self.seed,
        )

    def prior(self) -> PriorConfig:
        side = self.image_size // self.f
        return PriorConfig(
            layers=self.prior_layers,
            heads=self.prior_heads,
            embed_dim=self.prior_embed_dim,
            hidden_dim=self.prior_hidden_dim,
            h=side,
            w=side,
            c=self.c,
            num_codes=self.K,
            num_classes=self.num_classes,
            mode="causal" if self.stage == "prior_auto" else "mask",
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for fld in fields(self):
            value = getattr(self, fld.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{fld.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_pairs(text))

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out
