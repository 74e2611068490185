"""Spiral-window attention blocks and the coarse-to-fine mesh regressor."""

from __future__ import annotations

import math

import numpy as np

from ..spiral import SpiralTable
from ..tensor import (MLP, LayerNorm, Linear, Module, Parameter, Tensor, gather_rows, matmul, softmax_lastdim,
                      sparse_apply)


def positional_encoding(V: int, C: int) -> np.ndarray:
    """Sinusoidal table: column 2i is sin(pos / 10000^(2i/C)), column 2i+1 the cosine."""
    if C % 2:
        raise ValueError(f"positional encoding needs even C, got {C}")
    pos = np.arange(V, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, C, 2, dtype=np.float64) / C)
    pe = np.zeros((V, C))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


class SWMSA(Module):
    """Multi-head attention where each vertex attends over its spiral window."""

    def __init__(self, C: int, heads: int, table: SpiralTable, rng: np.random.Generator, dense: bool = False):
        if C % heads:
            raise ValueError(f"{C} channels do not split into {heads} heads")
        self.heads = heads
        self.table = table
        # dense: every vertex attends to all vertices, computed without gathering.
        self.dense = dense
        self.q = Linear(C, C, rng)
        self.k = Linear(C, C, rng)
        self.v = Linear(C, C, rng)
        self.proj = Linear(C, C, rng)
        self.mask = np.where(table.pad_mask, -np.inf, 0.0)
        self.last_attention = None

    def forward(self, x: Tensor) -> Tensor:
        B, V, C = x.shape
        if V != self.table.V:
            raise ValueError(f"input has {V} vertices, spiral table has {self.table.V}")
        M, K = self.heads, self.table.K
        Cm = C // M
        if self.dense:
            return self._dense_forward(x)
        q = self.q(x).reshape(B, V, M, 1, Cm)
        k = gather_rows(self.k(x), self.table.indices, self.table.pad_sentinel)
        v = gather_rows(self.v(x), self.table.indices, self.table.pad_sentinel)
        k = k.reshape(B, V, K, M, Cm).transpose((0, 1, 3, 4, 2))  # B V M Cm K
        v = v.reshape(B, V, K, M, Cm).transpose((0, 1, 3, 2, 4))  # B V M K Cm
        logits = matmul(q, k) * (1.0 / math.sqrt(Cm))
        logits = logits + Tensor(self.mask[None, :, None, None, :].astype(x.dtype))
        attn = softmax_lastdim(logits)
        self.last_attention = attn.data[:, :, :, 0, :]
        out = matmul(attn, v).reshape(B, V, C)
        return self.proj(out)

    def _dense_forward(self, x: Tensor) -> Tensor:
        # Same attention as a full spiral table; keys come in vertex-index order,
        # so ``last_attention`` is [B, V, M, V] indexed by vertex.
        B, V, C = x.shape
        M = self.heads
        Cm = C // M
        q = self.q(x).reshape(B, V, M, Cm).transpose((0, 2, 1, 3))
        k = self.k(x).reshape(B, V, M, Cm).transpose((0, 2, 3, 1))
        v = self.v(x).reshape(B, V, M, Cm).transpose((0, 2, 1, 3))
        attn = softmax_lastdim(matmul(q, k) * (1.0 / math.sqrt(Cm)))
        self.last_attention = attn.data.transpose(0, 2, 1, 3)
        out = matmul(attn, v).transpose((0, 2, 1, 3)).reshape(B, V, C)
        return self.proj(out)


class SpiralConvMixer(Module):
    """Fully connected layer over the concatenated spiral window."""

    def __init__(self, C: int, table: SpiralTable, rng: np.random.Generator):
        self.table = table
        self.fc = Linear(table.K * C, C, rng)

    def forward(self, x: Tensor) -> Tensor:
        B, V, C = x.shape
        g = gather_rows(x, self.table.indices, self.table.pad_sentinel)
        return self.fc(g.reshape(B, V, self.table.K * C))


class DepthwiseMixer(Module):
    """Per-channel weights over the spiral window followed by a pointwise layer."""

    def __init__(self, C: int, table: SpiralTable, rng: np.random.Generator):
        self.table = table
        bound = math.sqrt(1.0 / table.K)
        self.depthwise = Parameter(rng.uniform(-bound, bound, size=(table.K, C)))
        self.pointwise = Linear(C, C, rng)

    def forward(self, x: Tensor) -> Tensor:
        g = gather_rows(x, self.table.indices, self.table.pad_sentinel)
        return self.pointwise((g * self.depthwise).sum(axis=2))


def make_mixer(kind: str, C: int, heads: int, table: SpiralTable, rng) -> Module:
    if kind == "sw_msa":
        return SWMSA(C, heads, table, rng)
    if kind == "global_msa":
        return SWMSA(C, heads, SpiralTable.full(table.V), rng, dense=True)
    if kind == "spiral_conv":
        return SpiralConvMixer(C, table, rng)
    if kind == "depthwise_conv":
        return DepthwiseMixer(C, table, rng)
    raise ValueError(f"unknown decoder {kind!r}")


class SpiralTransformerBlock(Module):
    """Pre-norm residual block: z' = mix(LN(z)) + z, then out = MLP(LN(z')) + z'."""

    def __init__(self, C: int, heads: int, table: SpiralTable, rng: np.random.Generator,
                 mlp_ratio: int = 2, kind: str = "sw_msa"):
        self.norm1 = LayerNorm(C)
        self.attn = make_mixer(kind, C, heads, table, rng)
        self.norm2 = LayerNorm(C)
        self.mlp = MLP(C, mlp_ratio * C, C, rng)

    def forward(self, z: Tensor) -> Tensor:
        z_hat = self.attn(self.norm1(z)) + z
        return self.mlp(self.norm2(z_hat)) + z_hat


class MeshRegressor(Module):
    """Coarse-to-fine decoder from coarsest-level features to fine vertex coordinates.

    ``tables`` and ``up_transforms`` are ordered coarse to fine;
    ``up_transforms[l]`` maps level ``l`` to level ``l + 1``.
    """

    def __init__(self, channels, tables, up_transforms, heads: int, rng: np.random.Generator,
                 blocks_per_level: int = 1, mlp_ratio: int = 2, kind: str = "sw_msa"):
        if len(channels) != len(tables) or len(up_transforms) != len(tables) - 1:
            raise ValueError("channels, tables and up_transforms disagree on the level count")
        self.channels = tuple(channels)
        self.counts = [t.V for t in tables]
        self.up_transforms = list(up_transforms)
        self.pe = [positional_encoding(t.V, c) for t, c in zip(tables, channels)]
        self.levels = [
            [SpiralTransformerBlock(c, heads, t, rng, mlp_ratio, kind) for _ in range(blocks_per_level)]
            for c, t in zip(channels, tables)
        ]
        self.adjust = [MLP(channels[l], channels[l + 1], channels[l + 1], rng) for l in range(len(tables) - 1)]
        self.head = Linear(channels[-1], 3, rng)
        self.token_counts = []

    def forward(self, x: Tensor) -> Tensor:
        self.token_counts = []
        for l, blocks in enumerate(self.levels):
            if x.shape[1] != self.counts[l] or x.shape[2] != self.channels[l]:
                raise ValueError(f"level {l} expects [B, {self.counts[l]}, {self.channels[l]}], got {x.shape}")
            self.token_counts.append(x.shape[1])
            x = x + Tensor(self.pe[l].astype(x.dtype))
            for block in blocks:
                x = block(x)
            if l < len(self.adjust):
                x = self.adjust[l](sparse_apply(self.up_transforms[l], x))
        return self.head(x)
