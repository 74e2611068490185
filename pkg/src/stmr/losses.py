"""Training losses on Tensors. Every L1-type term is a mean, not a sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, concat, gather_rows, matmul, ops

_EDGES = ((0, 1), (1, 2), (2, 0))


@dataclass(frozen=True)
class LossWeights:
    normal: float = 0.05
    edge: float = 0.5


def _check_same(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def mesh_and_pose_loss(V, V_gt, P, P_gt) -> tuple[Tensor, Tensor]:
    V, V_gt, P, P_gt = map(as_tensor, (V, V_gt, P, P_gt))
    _check_same(V, V_gt, "mesh loss")
    _check_same(P, P_gt, "pose loss")
    return ops.absolute(V - V_gt).mean(), ops.absolute(P - P_gt).mean()


def _edge_vectors(V: Tensor, faces: np.ndarray) -> Tensor:
    """[B, F, 3 edges, 3] edge vectors V_i - V_j for the (i, j) pairs of every face."""
    faces = np.asarray(faces)
    i = faces[:, [a for a, _ in _EDGES]]
    j = faces[:, [b for _, b in _EDGES]]
    return gather_rows(V, i) - gather_rows(V, j)


def normal_loss(V, faces, normals_gt, diagnostics: dict | None = None, eps: float = 1e-12) -> Tensor:
    """Mean of |unit(V_i - V_j) . n_c| over each face c and its three edges.

    ``normals_gt`` is [B, F, 3] (or [F, 3]). Zero-length predicted edges are
    skipped and counted in ``diagnostics['zero_length_edges']``.
    """
    V = as_tensor(V)
    e = _edge_vectors(V, faces)
    length_sq = (e * e).sum(axis=-1)
    valid = length_sq.data > eps
    skipped = int(valid.size - valid.sum())
    if diagnostics is not None:
        diagnostics["zero_length_edges"] = diagnostics.get("zero_length_edges", 0) + skipped
    safe = length_sq + Tensor((~valid).astype(V.dtype))
    n = np.asarray(normals_gt.data if isinstance(normals_gt, Tensor) else normals_gt, dtype=V.dtype)
    dots = (e * Tensor(n[..., None, :])).sum(axis=-1) / ops.sqrt(safe)
    terms = ops.absolute(dots) * Tensor(valid.astype(V.dtype))
    return terms.sum() * (1.0 / max(int(valid.sum()), 1))


def edge_loss(V, V_gt, faces) -> Tensor:
    V, V_gt = as_tensor(V), as_tensor(V_gt)
    _check_same(V, V_gt, "edge loss")
    e = _edge_vectors(V, faces)
    g = _edge_vectors(V_gt, faces).data
    length_gt = np.sqrt((g * g).sum(axis=-1))
    length = ops.sqrt((e * e).sum(axis=-1))
    return ops.absolute(length - Tensor(length_gt)).mean()


def consistency_losses(R, T, V1, V2, P1, P2) -> tuple[Tensor, Tensor]:
    """3-D term mean|R V1 - V2| and 2-D term mean|T [P1; 1] - P2|.

    ``R`` is [B, 3, 3] (or [3, 3]) and ``T`` is [B, 2, 3] (or [2, 3]).
    """
    V1, V2, P1, P2 = map(as_tensor, (V1, V2, P1, P2))
    _check_same(V1, V2, "3-D consistency")
    _check_same(P1, P2, "2-D consistency")
    R = np.asarray(R, dtype=V1.dtype)
    T = np.asarray(T, dtype=P1.dtype)
    rotated = matmul(V1, Tensor(np.swapaxes(R, -1, -2)))
    ones = Tensor(np.ones(P1.shape[:-1] + (1,), dtype=P1.dtype))
    moved = matmul(concat([P1, ones], axis=-1), Tensor(np.swapaxes(T, -1, -2)))
    return ops.absolute(rotated - V2).mean(), ops.absolute(moved - P2).mean()


TERMS = ("mesh", "pose2d", "normal", "edge", "con3d", "con2d")


def total_loss(terms: dict, weights: LossWeights = LossWeights()):
    """mesh + pose2d + w_n * normal + w_e * edge + con3d + con2d; missing terms count as 0."""
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    scale = {"mesh": 1.0, "pose2d": 1.0, "normal": weights.normal, "edge": weights.edge,
             "con3d": 1.0, "con2d": 1.0}
    total = 0.0
    for name in TERMS:
        if name in terms:
            total = total + terms[name] * scale[name]
    return total
