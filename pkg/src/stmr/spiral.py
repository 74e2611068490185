"""Ring algebra and spiral serialization of mesh neighborhoods.

A spiral for vertex ``v`` lists ``v`` followed by its 1-ring, 2-ring, ... in
a fixed rotational order and is truncated to ``K`` entries. Rings follow the
set recursion

    0-ring(v)     = {v}
    (h+1)-ring(v) = N(h-ring(v)) minus h-disk(v)
    h-disk(v)     = union of i-ring(v) for i <= h
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh_core import AdjacencyTable, Mesh, MeshError, build_adjacency, validate_manifold, vertex_fans

PAD = -1
_MAGIC = b"SPRL"
_HEADER = struct.Struct("<4sIIi")


def _check_vertex(adj: AdjacencyTable, v: int) -> None:
    if not 0 <= v < len(adj):
        raise IndexError(f"vertex {v} out of range for {len(adj)} vertices")


def ring(adj: AdjacencyTable, v: int, h: int) -> set[int]:
    _check_vertex(adj, v)
    if h < 0:
        raise ValueError("h must be non-negative")
    current, disk = {v}, {v}
    for _ in range(h):
        nxt = set()
        for u in current:
            nxt.update(adj.neighbors[u])
        current = nxt - disk
        disk |= current
    return current


def _ccw_neighbors(adj, faces, u) -> list[int]:
    return [w for chain in vertex_fans(adj, faces, u) for w in chain]


def spiral_sequence(mesh: Mesh, adj: AdjacencyTable, v: int, K: int, start: int | None = None) -> list[int]:
    """Spiral of length ``K`` around ``v``, padded with ``PAD``.

    Ring 1 runs counterclockwise (about the outward normal) from ``start``,
    which defaults to the smallest-index neighbor. Each later ring is
    collected by walking the previous ring in order and emitting, for every
    vertex, its unvisited outer neighbors in counterclockwise order; so ring
    h+1 starts next to the start of ring h.
    """
    _check_vertex(adj, v)
    if K < 1:
        raise ValueError("K must be >= 1")
    seq = [v]
    pos = {v: 0}
    ring1 = _ccw_neighbors(adj, mesh.faces, v)
    if ring1:
        s = min(ring1) if start is None else start
        if s not in ring1:
            raise ValueError(f"start vertex {s} is not adjacent to {v}")
        i = ring1.index(s)
        ring1 = ring1[i:] + ring1[:i]
    current = ring1
    while current and len(seq) < K:
        for u in current:
            pos[u] = len(seq)
            seq.append(u)
        nxt = []
        emitted = set()
        for u in current:
            cyc = _ccw_neighbors(adj, mesh.faces, u)
            inner = [k for k, w in enumerate(cyc) if w in pos]
            # Rotate to just after the most recently emitted inner neighbor.
            anchor = max(inner, key=lambda k: pos[cyc[k]])
            cyc = cyc[anchor + 1:] + cyc[:anchor + 1]
            for w in cyc:
                if w not in pos and w not in emitted:
                    emitted.add(w)
                    nxt.append(w)
        current = nxt
    seq = seq[:K]
    return seq + [PAD] * (K - len(seq))


@dataclass(frozen=True, eq=False)
class SpiralTable:
    indices: np.ndarray
    pad_sentinel: int = PAD

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def K(self) -> int:
        return self.indices.shape[1]

    @property
    def V(self) -> int:
        return self.indices.shape[0]

    @property
    def pad_mask(self) -> np.ndarray:
        return self.indices == self.pad_sentinel

    def __eq__(self, other):
        return (isinstance(other, SpiralTable) and self.pad_sentinel == other.pad_sentinel
                and np.array_equal(self.indices, other.indices))

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(_MAGIC, self.V, self.K, self.pad_sentinel)
        return head + self.indices.astype("<i4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SpiralTable":
        magic, V, K, sentinel = _HEADER.unpack_from(buf)
        if magic != _MAGIC:
            raise ValueError("not a spiral table file")
        idx = np.frombuffer(buf, dtype="<i4", count=V * K, offset=_HEADER.size).reshape(V, K)
        return cls(idx.astype(np.int64), sentinel)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SpiralTable":
        return cls.from_bytes(Path(path).read_bytes())

    def to_json(self) -> str:
        return json.dumps({"V": self.V, "K": self.K, "pad_sentinel": self.pad_sentinel,
                           "indices": self.indices.tolist()})

    @classmethod
    def full(cls, V: int) -> "SpiralTable":
        """Every row lists all vertices, self first (global attention)."""
        idx = np.empty((V, V), dtype=np.int64)
        for v in range(V):
            idx[v, 0] = v
            idx[v, 1:] = np.delete(np.arange(V), v)
        return cls(idx)


def build_spiral_table(mesh: Mesh, K: int, starts=None) -> SpiralTable:
    """Spiral rows for every vertex; ``starts`` optionally fixes each ring-1 start."""
    report = validate_manifold(mesh)
    if report.non_manifold_edges:
        raise MeshError(f"non-manifold mesh: {len(report.non_manifold_edges)} edges with >2 faces")
    adj = build_adjacency(mesh)
    rows = [
        spiral_sequence(mesh, adj, v, K, None if starts is None else int(starts[v]))
        for v in range(mesh.n_vertices)
    ]
    return SpiralTable(np.array(rows, dtype=np.int64).reshape(mesh.n_vertices, K))
