"""Stride-2 convolutional feature pyramid with a skip-connected decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Conv2d, Module, Tensor, concat, gelu, upsample2x
from .config import ModelConfig


@dataclass
class FeaturePyramid:
    encoder: list  # E0..E4 at strides 2..32
    d3: Tensor  # C3 channels, stride 16
    d2: Tensor  # C2 channels, stride 8

    def maps(self, multi_scale: bool = True) -> list:
        return [*self.encoder, self.d3, self.d2] if multi_scale else [self.d2]


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.encoder_channels
        self.stages = [Conv2d(cin, cout, 3, rng, stride=2) for cin, cout in zip((3,) + c[:-1], c)]
        self.dec3 = Conv2d(c[4] + c[3], c[3], 3, rng)
        self.dec2 = Conv2d(c[3] + c[2], c[2], 3, rng)

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] image, got {image.shape}")
        if image.shape[2] % 32 or image.shape[3] % 32:
            raise ValueError(f"image extents {image.shape[2:]} not divisible by 32")
        feats = []
        x = image
        for stage in self.stages:
            x = gelu(stage(x))
            feats.append(x)
        d3 = gelu(self.dec3(concat([upsample2x(feats[4]), feats[3]], axis=1)))
        d2 = gelu(self.dec2(concat([upsample2x(d3), feats[2]], axis=1)))
        return FeaturePyramid(feats, d3, d2)
