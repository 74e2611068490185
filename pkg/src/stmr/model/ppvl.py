"""Predefined pose-to-vertex lifting."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor import Module, Parameter, Tensor, matmul

SKIN_THRESHOLD = 0.2
FINGERTIP_VALUE = 0.2


@dataclass
class LiftMatrix:
    """Initial lift values with the mask of entries allowed to be nonzero."""

    values: np.ndarray
    mask: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def build_ppvl_matrix(skin_weights, coarse_index_map, fingertip_neighbors) -> LiftMatrix:
    """Coarse-vertex x joint lift matrix from skinning weights plus fingertip links.

    Rows are the skinning weights of the coarse vertices, kept only where
    they exceed 0.2; five extra fingertip columns hold 0.2 at each
    fingertip's neighbor vertices.
    """
    W = np.asarray(skin_weights, dtype=np.float64)
    idx = np.asarray(coarse_index_map, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= len(W):
        raise IndexError("coarse_index_map entry out of range")
    head = W[idx]
    keep = head > SKIN_THRESHOLD
    head = np.where(keep, head, 0.0)
    tips = np.zeros((len(idx), len(fingertip_neighbors)))
    for f, nbrs in enumerate(fingertip_neighbors):
        if len(nbrs) == 0:
            raise ValueError(f"fingertip {f} has no neighbor vertices")
        nbrs = np.asarray(nbrs)
        if nbrs.min() < 0 or nbrs.max() >= len(idx):
            raise IndexError(f"fingertip {f} neighbor out of range")
        tips[nbrs, f] = FINGERTIP_VALUE
    values = np.concatenate([head, tips], axis=1)
    mask = np.concatenate([keep, tips > 0], axis=1)
    return LiftMatrix(values, mask)


def random_lift_matrix(n_vertices: int, n_joints: int, rng: np.random.Generator) -> LiftMatrix:
    bound = np.sqrt(1.0 / n_joints)
    return LiftMatrix(rng.uniform(-bound, bound, size=(n_vertices, n_joints)),
                      np.ones((n_vertices, n_joints), dtype=bool))


def load_skinning_file(path) -> dict:
    """Read ``weights`` (V x 16 row-major), ``coarse_index_map`` and ``fingertip_neighbors``."""
    doc = json.loads(Path(path).read_text())
    weights = np.asarray(doc["weights"], dtype=np.float64)
    if weights.ndim == 1:
        weights = weights.reshape(-1, 16)
    return {"weights": weights, "coarse_index_map": np.asarray(doc["coarse_index_map"], dtype=np.int64),
            "fingertip_neighbors": [list(map(int, n)) for n in doc["fingertip_neighbors"]]}


class PPVL(Module):
    def __init__(self, lift: LiftMatrix):
        self.matrix = Parameter(lift.values * lift.mask)
        self.mask = np.asarray(lift.mask, dtype=bool)

    def forward(self, pose_features: Tensor) -> Tensor:
        # The mask multiply keeps structural zeros at zero gradient.
        effective = self.matrix * Tensor(self.mask.astype(self.matrix.dtype))
        return matmul(effective, pose_features)
