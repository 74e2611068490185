"""2-D joint regression and multi-scale pose feature extraction."""

from __future__ import annotations

import numpy as np

from ..tensor import MLP, Conv2d, Module, Tensor, bilinear_sample, concat, ops
from .config import ModelConfig
from .encoder import FeaturePyramid


class JointRegressor2D(Module):
    """1x1 conv to one map per joint, flatten each map, shared MLP, tanh to [-1, 1]."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        side = cfg.level_extent(2)
        self.n_joints = cfg.n_joints
        self.to_joints = Conv2d(cfg.encoder_channels[2], cfg.n_joints, 1, rng)
        self.mlp = MLP(side * side, cfg.regressor_hidden, 2, rng)

    def forward(self, d2: Tensor) -> Tensor:
        maps = self.to_joints(d2)
        B, N, h, w = maps.shape
        return ops.tanh(self.mlp(maps.reshape(B, N, h * w)))


class MSPFE(Module):
    """Sample every pyramid level at the 2-D joints and mix the stacked features.

    With ``multi_scale=False`` only the stride-8 decoder map is sampled.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, multi_scale: bool = True):
        c = cfg.encoder_channels
        self.multi_scale = multi_scale
        self.in_width = (sum(c) + c[3] + c[2]) if multi_scale else c[2]
        self.mlp = MLP(self.in_width, cfg.mspfe_hidden, cfg.level_channels[0], rng)

    def forward(self, pyramid: FeaturePyramid, pose: Tensor) -> Tensor:
        sampled = [bilinear_sample(m, pose) for m in pyramid.maps(self.multi_scale)]
        return self.mlp(concat(sampled, axis=-1))
