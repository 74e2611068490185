from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

DECODERS = ("sw_msa", "global_msa", "spiral_conv", "depthwise_conv")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``level_channels`` runs coarse to fine, one entry per hierarchy level.
    Mesh coordinates are regressed in units of ``coord_scale`` millimeters.
    """

    image_size: int = 128
    encoder_channels: tuple = (16, 32, 64, 128, 256)
    n_joints: int = 21
    level_channels: tuple = (256, 128, 64, 32, 16)
    heads: int = 4
    blocks_per_level: int = 1
    K: int = 9
    mlp_ratio: int = 2
    regressor_hidden: int = 64
    mspfe_hidden: int = 128
    decoder: str = "sw_msa"
    use_mspfe: bool = True
    use_ppvl: bool = True
    coord_scale: float = 100.0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.level_channels = tuple(self.level_channels)
        self.validate()

    def validate(self) -> None:
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if len(self.encoder_channels) != 5:
            raise ValueError("encoder_channels needs 5 entries")
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}; expected one of {DECODERS}")
        for c in self.level_channels:
            if c % self.heads:
                raise ValueError(f"level channels {c} not divisible by {self.heads} heads")
            if c % 2:
                raise ValueError("positional encodings need an even channel count")

    def level_extent(self, level: int) -> int:
        return self.image_size // 2 ** (level + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["level_channels"] = list(self.level_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale settings used by tests and the overfit experiment."""
    base = dict(image_size=32, encoder_channels=(8, 8, 16, 16, 16), level_channels=(32, 32, 16, 16, 16),
                heads=2, regressor_hidden=32, mspfe_hidden=64)
    base.update(overrides)
    return ModelConfig(**base)
