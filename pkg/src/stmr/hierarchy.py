"""Quadric-error edge-collapse simplification and the coarse-to-fine mesh stack."""

from __future__ import annotations

import heapq
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh_core import Mesh, MeshError, build_adjacency, load_obj, save_obj, validate_manifold
from .spiral import SpiralTable, build_spiral_table

SINGULAR_COND = 1e8
_TRIPLET_HEADER = struct.Struct("<4sIII")


class SimplificationError(MeshError):
    def __init__(self, msg, achieved: int):
        super().__init__(f"{msg} (achieved {achieved} vertices)")
        self.achieved = achieved


@dataclass
class CollapseLog:
    costs: list = field(default_factory=list)
    midpoint_fallbacks: int = 0
    rejected: int = 0


def _face_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm == 0.0:
        return np.zeros((4, 4))
    n = n / norm
    plane = np.append(n, -n @ p0)
    return np.outer(plane, plane)


def _optimal_placement(Q, pa, pb):
    A = Q[:3, :3]
    if np.linalg.cond(A) <= SINGULAR_COND:
        x = np.linalg.solve(A, -Q[:3, 3])
        fallback = False
    else:
        x = 0.5 * (pa + pb)
        fallback = True
    h = np.append(x, 1.0)
    return x, max(float(h @ Q @ h), 0.0), fallback


class _Collapser:
    def __init__(self, mesh: Mesh):
        self.pos = mesh.vertices.copy()
        self.orig = mesh.vertices
        self.faces = [list(f) for f in mesh.faces.tolist()]
        n = mesh.n_vertices
        self.vfaces = [set() for _ in range(n)]
        for k, f in enumerate(self.faces):
            for v in f:
                self.vfaces[v].add(k)
        self.Q = np.zeros((n, 4, 4))
        for f in self.faces:
            K = _face_quadric(*self.pos[f])
            for v in f:
                self.Q[v] += K
        self.alive = np.ones(n, dtype=bool)
        self.parent = np.arange(n)
        self.version = np.zeros(n, dtype=np.int64)
        self.n_alive = n
        self.heap = []
        self.rejected = set()
        self.log = CollapseLog()
        for i, j in mesh.edges().tolist():
            self._push(i, j)

    def neighbors(self, v):
        out = set()
        for k in self.vfaces[v]:
            out.update(self.faces[k])
        out.discard(v)
        return out

    def _push(self, i, j):
        i, j = min(i, j), max(i, j)
        Q = self.Q[i] + self.Q[j]
        x, cost, fallback = _optimal_placement(Q, self.pos[i], self.pos[j])
        heapq.heappush(self.heap, (cost, i, j, int(self.version[i]), int(self.version[j]), fallback))

    def _valid(self, i, j, x):
        shared = self.vfaces[i] & self.vfaces[j]
        opposite = set()
        for k in shared:
            opposite.update(self.faces[k])
        opposite -= {i, j}
        # Link condition.
        if self.neighbors(i) & self.neighbors(j) != opposite:
            return False
        seen = set()
        for v in (i, j):
            for k in self.vfaces[v] - shared:
                f = [i if w == j else w for w in self.faces[k]]
                key = frozenset(f)
                if key in seen:
                    return False
                seen.add(key)
                # Neither the working geometry nor the subset geometry may flip.
                for pos, xi in ((self.pos, x), (self.orig, self.orig[i])):
                    p_old = pos[self.faces[k]]
                    p_new = np.array([xi if w == i else pos[w] for w in f])
                    n_old = np.cross(p_old[1] - p_old[0], p_old[2] - p_old[0])
                    n_new = np.cross(p_new[1] - p_new[0], p_new[2] - p_new[0])
                    if 0.5 * np.linalg.norm(n_new) < 1e-12 or n_old @ n_new <= 0.0:
                        return False
        return True

    def collapse_one(self) -> bool:
        while self.heap:
            cost, i, j, vi, vj, fallback = heapq.heappop(self.heap)
            if not (self.alive[i] and self.alive[j]):
                continue
            if vi != self.version[i] or vj != self.version[j]:
                continue
            if j not in self.neighbors(i):
                continue
            Q = self.Q[i] + self.Q[j]
            x, _, _ = _optimal_placement(Q, self.pos[i], self.pos[j])
            if not self._valid(i, j, x):
                self.rejected.add((i, j))
                self.log.rejected += 1
                continue
            self._apply(i, j, x, Q)
            self.log.costs.append(cost)
            self.log.midpoint_fallbacks += int(fallback)
            return True
        return False

    def _apply(self, i, j, x, Q):
        shared = self.vfaces[i] & self.vfaces[j]
        for k in shared:
            for v in self.faces[k]:
                self.vfaces[v].discard(k)
            self.faces[k] = None
        for k in self.vfaces[j]:
            self.faces[k] = [i if w == j else w for w in self.faces[k]]
            self.vfaces[i].add(k)
        self.vfaces[j] = set()
        self.alive[j] = False
        self.parent[j] = i
        self.pos[i] = x
        self.Q[i] = Q
        self.version[i] += 1
        self.n_alive -= 1
        ring = self.neighbors(i)
        for w in sorted(ring):
            self._push(i, w)
        # Retry earlier rejections whose neighborhood just changed.
        touched = ring | {i}
        retry = sorted(e for e in self.rejected if e[0] in touched or e[1] in touched)
        for e in retry:
            self.rejected.discard(e)
            if self.alive[e[0]] and self.alive[e[1]]:
                self._push(*e)

    def root(self, v):
        while self.parent[v] != v:
            v = self.parent[v]
        return v

    def result(self):
        keep = np.flatnonzero(self.alive)
        new_id = -np.ones(len(self.alive), dtype=np.int64)
        new_id[keep] = np.arange(len(keep))
        faces = [[new_id[v] for v in f] for f in self.faces if f is not None]
        down = np.array([new_id[self.root(v)] for v in range(len(self.alive))], dtype=np.int64)
        # Survivors keep their original positions; the quadric minimizer only
        # drives collapse order and the validity checks.
        return Mesh(self.orig[keep], np.array(faces, dtype=np.int64).reshape(-1, 3)), down


def simplify_qem(mesh: Mesh, target_count: int, return_log: bool = False):
    """Collapse edges in order of quadric error until ``target_count`` vertices remain.

    The survivor of a collapse keeps the smaller index, moves to the quadric
    minimizer (edge midpoint if the quadric is near-singular) for the rest of
    the run, and is reported at its original position, so the coarse vertex
    set is a subset of the fine one. Equal costs
    are broken by the lexicographically smallest edge. Collapses that violate
    the link condition, duplicate a face or flip a face normal are skipped.
    Returns ``(coarse_mesh, down_map)`` where ``down_map[i]`` is the coarse
    vertex that fine vertex ``i`` merged into.
    """
    if not 0 < target_count < mesh.n_vertices:
        raise ValueError(f"target_count must be in (0, {mesh.n_vertices})")
    report = validate_manifold(mesh)
    if not report.ok:
        raise MeshError("simplify_qem needs a manifold mesh without isolated vertices")
    c = _Collapser(mesh)
    while c.n_alive > target_count:
        if not c.collapse_one():
            raise SimplificationError("no collapsible edge left", c.n_alive)
    coarse, down = c.result()
    return (coarse, down, c.log) if return_log else (coarse, down)


def survivors(down_map: np.ndarray, n_coarse: int) -> np.ndarray:
    """Fine index kept by each coarse vertex (the smallest index of its preimage)."""
    out = np.full(n_coarse, np.iinfo(np.int64).max)
    np.minimum.at(out, down_map, np.arange(len(down_map)))
    return out


def closest_point_barycentric(p, a, b, c):
    """Barycentric weights of the closest point to ``p`` on triangles ``(a, b, c)``.

    ``a``, ``b`` and ``c`` are (F, 3) arrays; returns (F, 3) weights and the
    (F,) squared distances. Region tests follow Ericson's closest-point
    construction.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    F = len(a)
    w = np.zeros((F, 3))
    done = np.zeros(F, dtype=bool)

    def assign(mask, weights):
        m = mask & ~done
        w[m] = weights[m] if weights.ndim == 2 else weights
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), np.array([1.0, 0.0, 0.0]))
        assign((d3 >= 0) & (d4 <= d3), np.array([0.0, 1.0, 0.0]))
        t = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - t, t, 0 * t], axis=1))
        assign((d6 >= 0) & (d5 <= d6), np.array([0.0, 0.0, 1.0]))
        t = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - t, 0 * t, t], axis=1))
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.stack([0 * t, 1 - t, t], axis=1))
        denom = 1.0 / (va + vb + vc)
        v_, w_ = vb * denom, vc * denom
        assign(np.ones(F, dtype=bool), np.stack([1 - v_ - w_, v_, w_], axis=1))
    q = w[:, :1] * a + w[:, 1:2] * b + w[:, 2:] * c
    return w, np.einsum("ij,ij->i", q - p, q - p)


def _components(mesh: Mesh) -> np.ndarray:
    from scipy.sparse.csgraph import connected_components

    e = mesh.edges()
    n = mesh.n_vertices
    g = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    return connected_components(g, directed=False)[1]


def upsample_matrix(fine: Mesh, coarse: Mesh, down_map, max_distance: float | None = None,
                    diagnostics: dict | None = None) -> sp.csr_matrix:
    """Sparse (fine x coarse) interpolation matrix with convex rows.

    Surviving vertices get a unit row; every other fine vertex takes the
    barycentric weights of its projection onto the nearest coarse face in
    the same connected component. Projections that fail (degenerate face,
    non-finite weights or farther than ``max_distance``) fall back to weight
    1 on the coarse vertex the fine vertex collapsed into.
    """
    down_map = np.asarray(down_map)
    keep = survivors(down_map, coarse.n_vertices)
    is_survivor = np.zeros(fine.n_vertices, dtype=bool)
    is_survivor[keep] = True
    comp = _components(coarse)
    face_comp = comp[coarse.faces[:, 0]]
    cv = coarse.vertices
    rows, cols, vals = [], [], []
    fallbacks = 0
    for i in range(fine.n_vertices):
        c0 = int(down_map[i])
        if is_survivor[i]:
            rows.append(i), cols.append(c0), vals.append(1.0)
            continue
        cand = np.flatnonzero(face_comp == comp[c0])
        f = coarse.faces[cand]
        a, b, c = cv[f[:, 0]], cv[f[:, 1]], cv[f[:, 2]]
        w, d2 = closest_point_barycentric(fine.vertices[i][None, :], a, b, c)
        k = int(np.argmin(d2))
        wk = np.clip(w[k], 0.0, None)
        area = 0.5 * np.linalg.norm(np.cross(b[k] - a[k], c[k] - a[k]))
        ok = np.isfinite(wk).all() and wk.sum() > 0 and area >= 1e-12
        if max_distance is not None and d2[k] > max_distance ** 2:
            ok = False
        if not ok:
            fallbacks += 1
            rows.append(i), cols.append(c0), vals.append(1.0)
            continue
        wk = wk / wk.sum()
        for col, val in sorted(zip(f[k].tolist(), wk.tolist())):
            if val > 0.0:
                rows.append(i), cols.append(col), vals.append(val)
    if diagnostics is not None:
        diagnostics["projection_fallbacks"] = diagnostics.get("projection_fallbacks", 0) + fallbacks
    m = sp.coo_matrix((vals, (rows, cols)), shape=(fine.n_vertices, coarse.n_vertices)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


@dataclass(eq=False)
class MeshHierarchy:
    """Levels ordered fine to coarse with the transforms between neighbors.

    ``up_transforms[l]`` maps level ``l + 1`` (coarse) to level ``l``;
    ``down_maps[l]`` sends each vertex of level ``l`` to level ``l + 1``.
    """

    levels: list
    up_transforms: list
    down_maps: list
    spiral_tables: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def counts(self) -> list[int]:
        return [m.n_vertices for m in self.levels]

    @property
    def K(self) -> int:
        return self.spiral_tables[0].K

    def coarse_index_map(self) -> np.ndarray:
        """Index into the finest level of every coarsest-level vertex."""
        idx = np.arange(self.levels[-1].n_vertices)
        for l in range(len(self.down_maps) - 1, -1, -1):
            idx = survivors(self.down_maps[l], self.levels[l + 1].n_vertices)[idx]
        return idx

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {"format": "stmr-hierarchy", "version": 1, "counts": self.counts, "K": self.K,
                    "levels": []}
        for l, mesh in enumerate(self.levels):
            entry = {"mesh": f"level_{l}.obj", "spiral": f"spiral_{l}.bin"}
            save_obj(mesh, d / entry["mesh"])
            self.spiral_tables[l].save(d / entry["spiral"])
            if l < len(self.up_transforms):
                entry["up"] = f"up_{l}.bin"
                entry["down"] = f"down_{l}.bin"
                write_triplets(self.up_transforms[l], d / entry["up"])
                (d / entry["down"]).write_bytes(np.asarray(self.down_maps[l], dtype="<i4").tobytes())
            manifest["levels"].append(entry)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "MeshHierarchy":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        levels, ups, downs, tables = [], [], [], []
        for entry in manifest["levels"]:
            levels.append(load_obj(d / entry["mesh"]))
            tables.append(SpiralTable.load(d / entry["spiral"]))
            if "up" in entry:
                ups.append(read_triplets(d / entry["up"]))
                downs.append(np.frombuffer((d / entry["down"]).read_bytes(), dtype="<i4").astype(np.int64))
        return cls(levels, ups, downs, tables)


def write_triplets(m: sp.spmatrix, path) -> None:
    coo = sp.coo_matrix(m)
    order = np.lexsort((coo.col, coo.row))
    rec = np.empty(coo.nnz, dtype=[("r", "<i4"), ("c", "<i4"), ("v", "<f8")])
    rec["r"], rec["c"], rec["v"] = coo.row[order], coo.col[order], coo.data[order]
    head = _TRIPLET_HEADER.pack(b"SPTR", coo.shape[0], coo.shape[1], coo.nnz)
    Path(path).write_bytes(head + rec.tobytes())


def read_triplets(path) -> sp.csr_matrix:
    buf = Path(path).read_bytes()
    magic, n_rows, n_cols, nnz = _TRIPLET_HEADER.unpack_from(buf)
    if magic != b"SPTR":
        raise ValueError("not a sparse triplet file")
    rec = np.frombuffer(buf, dtype=[("r", "<i4"), ("c", "<i4"), ("v", "<f8")], count=nnz,
                        offset=_TRIPLET_HEADER.size)
    return sp.csr_matrix((rec["v"].astype(np.float64), (rec["r"], rec["c"])), shape=(n_rows, n_cols))


def build_hierarchy(template: Mesh, num_levels: int = 4, factor: int = 2, K: int = 9) -> MeshHierarchy:
    if not validate_manifold(template).ok:
        raise MeshError("template does not pass validate_manifold")
    levels, ups, downs = [template], [], []
    diagnostics = {"projection_fallbacks": 0, "midpoint_fallbacks": 0}
    for _ in range(num_levels):
        fine = levels[-1]
        coarse, down, log = simplify_qem(fine, math.ceil(fine.n_vertices / factor), return_log=True)
        diagnostics["midpoint_fallbacks"] += log.midpoint_fallbacks
        ups.append(upsample_matrix(fine, coarse, down, diagnostics=diagnostics))
        downs.append(down)
        levels.append(coarse)
    tables = [build_spiral_table(m, K) for m in levels]
    return MeshHierarchy(levels, ups, downs, tables, diagnostics)
