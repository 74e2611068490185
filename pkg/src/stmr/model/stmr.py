"""The full image-to-mesh network."""

from __future__ import annotations

import numpy as np

from ..hierarchy import MeshHierarchy
from ..tensor import Module, Tensor
from .config import ModelConfig
from .encoder import Encoder
from .pose import MSPFE, JointRegressor2D
from .ppvl import PPVL, LiftMatrix, random_lift_matrix
from .transformer import MeshRegressor


class STMR(Module):
    """Encoder, 2-D joint regressor, MSPFE, PPVL and spiral-transformer regressor.

    ``forward`` maps [B, 3, H, W] images to ``(pose2d [B, N, 2], vertices [B, V, 3])``
    with vertices in units of ``cfg.coord_scale`` mm.
    """

    def __init__(self, cfg: ModelConfig, hierarchy: MeshHierarchy, lift: LiftMatrix | None,
                 rng: np.random.Generator):
        n_levels = len(hierarchy.levels)
        if len(cfg.level_channels) != n_levels:
            raise ValueError(f"config has {len(cfg.level_channels)} level channels, hierarchy has {n_levels} levels")
        if hierarchy.K != cfg.K:
            raise ValueError(f"hierarchy spirals use K={hierarchy.K}, config wants K={cfg.K}")
        self.cfg = cfg
        coarse_count = hierarchy.levels[-1].n_vertices
        if not cfg.use_ppvl or lift is None:
            lift = random_lift_matrix(coarse_count, cfg.n_joints, rng)
        if lift.shape != (coarse_count, cfg.n_joints):
            raise ValueError(f"lift matrix {lift.shape} does not match ({coarse_count}, {cfg.n_joints})")
        self.encoder = Encoder(cfg, rng)
        self.regressor2d = JointRegressor2D(cfg, rng)
        self.mspfe = MSPFE(cfg, rng, multi_scale=cfg.use_mspfe)
        self.ppvl = PPVL(lift)
        tables = hierarchy.spiral_tables[::-1]
        ups = hierarchy.up_transforms[::-1]
        self.mesh_regressor = MeshRegressor(cfg.level_channels, tables, ups, cfg.heads, rng,
                                            cfg.blocks_per_level, cfg.mlp_ratio, cfg.decoder)
        self.assign_names()

    def forward(self, image: Tensor):
        if image.shape[2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(f"expected {self.cfg.image_size}px images, got {image.shape[2:]}")
        pyramid = self.encoder(image)
        pose = self.regressor2d(pyramid.d2)
        pose_features = self.mspfe(pyramid, pose)
        vertex_features = self.ppvl(pose_features)
        return pose, self.mesh_regressor(vertex_features)

    @property
    def structural_mask(self) -> np.ndarray:
        return self.ppvl.mask
