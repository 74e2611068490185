"""Triangle meshes: representation, adjacency, normals, validation and OBJ I/O."""

from __future__ import annotations

import json
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    """Raised for malformed meshes or unreadable mesh files."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Vertex positions (mm) and counterclockwise-wound triangle faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise MeshError("face index out of range")
        if faces.size:
            bad = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
            if bad.any():
                raise MeshError(f"degenerate face {int(np.flatnonzero(bad)[0])}: repeated vertex index")
        verts.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) rows, lexicographically ordered."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0) if len(e) else e.reshape(0, 2)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces)

    def relabel(self, perm) -> "Mesh":
        """Mesh with old vertex ``i`` renamed to ``perm[i]``."""
        perm = np.asarray(perm)
        verts = np.empty_like(self.vertices)
        verts[perm] = self.vertices
        return Mesh(verts, perm[self.faces])


@dataclass(frozen=True)
class AdjacencyTable:
    neighbors: tuple[tuple[int, ...], ...]
    incident_faces: tuple[tuple[int, ...], ...]

    def __len__(self):
        return len(self.neighbors)


@dataclass
class ValidationReport:
    non_manifold_edges: list = field(default_factory=list)
    isolated_vertices: list = field(default_factory=list)
    duplicate_faces: list = field(default_factory=list)
    inconsistent_winding_edges: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        # Inconsistent winding only warns.
        return not (self.non_manifold_edges or self.isolated_vertices or self.duplicate_faces)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "non_manifold_edges": [list(map(int, e)) for e in self.non_manifold_edges],
            "isolated_vertices": [int(v) for v in self.isolated_vertices],
            "duplicate_faces": [list(map(int, f)) for f in self.duplicate_faces],
            "inconsistent_winding_edges": [list(map(int, e)) for e in self.inconsistent_winding_edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def load_obj(path) -> Mesh:
    """Read an ASCII OBJ with ``v``/``f`` records into a 0-based Mesh."""
    verts, faces = [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                    if len(idx) != 3:
                        raise MeshError(f"line {lineno}: non-triangular face with {len(idx)} vertices")
                    faces.append(idx)
            except MeshError:
                raise
            except ValueError as exc:
                raise MeshError(f"line {lineno}: parse error: {exc}") from exc
    n = len(verts)
    out = []
    for k, f in enumerate(faces):
        # Negative indices are relative to the end, as in the OBJ format.
        g = [i - 1 if i > 0 else n + i for i in f]
        if any(i < 0 or i >= n for i in g):
            raise MeshError(f"face {k}: vertex index out of range (have {n} vertices)")
        out.append(g)
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(out, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("".join(lines), encoding="ascii")


def build_adjacency(mesh: Mesh) -> AdjacencyTable:
    nbrs = [set() for _ in range(mesh.n_vertices)]
    inc = [[] for _ in range(mesh.n_vertices)]
    for k, (a, b, c) in enumerate(mesh.faces.tolist()):
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
        inc[a].append(k)
        inc[b].append(k)
        inc[c].append(k)
    return AdjacencyTable(tuple(tuple(sorted(s)) for s in nbrs), tuple(tuple(f) for f in inc))


def face_areas(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def face_unit_normals(mesh: Mesh) -> np.ndarray:
    """Unit normals following the right-hand rule over each face's winding."""
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    length = np.linalg.norm(n, axis=1)
    bad = 0.5 * length < DEGENERATE_AREA
    if bad.any():
        raise MeshError(f"degenerate face {int(np.flatnonzero(bad)[0])}: zero area")
    return n / length[:, None]


def validate_manifold(mesh: Mesh) -> ValidationReport:
    report = ValidationReport()
    edge_faces = defaultdict(list)
    directed = Counter()
    for k, (a, b, c) in enumerate(mesh.faces.tolist()):
        for i, j in ((a, b), (b, c), (c, a)):
            edge_faces[(min(i, j), max(i, j))].append(k)
            directed[(i, j)] += 1
    for e in sorted(edge_faces):
        fs = edge_faces[e]
        if len(fs) > 2:
            report.non_manifold_edges.append(e)
        elif directed[e] > 1 or directed[(e[1], e[0])] > 1:
            report.inconsistent_winding_edges.append(e)
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.ravel()] = True
    report.isolated_vertices = np.flatnonzero(~used).tolist()
    seen = {}
    for k, f in enumerate(mesh.faces.tolist()):
        key = tuple(sorted(f))
        if key in seen:
            report.duplicate_faces.append((seen[key], k))
        else:
            seen[key] = k
    if report.inconsistent_winding_edges:
        warnings.warn(f"{len(report.inconsistent_winding_edges)} edges with inconsistent winding", stacklevel=2)
    return report


def vertex_fans(adj: AdjacencyTable, faces: np.ndarray, v: int) -> list[list[int]]:
    """Neighbors of ``v`` in counterclockwise order, one chain per fan.

    Closed fans (interior vertices) come back as a cycle without repetition;
    open fans (boundary vertices) start at their boundary end. Chains are
    ordered by their smallest member.
    """
    nxt = {}
    for k in adj.incident_faces[v]:
        f = faces[k]
        i = int(np.flatnonzero(f == v)[0])
        a, b = int(f[(i + 1) % 3]), int(f[(i + 2) % 3])
        nxt[a] = b
    has_prev = set(nxt.values())
    remaining = set(nxt) | has_prev
    chains = []
    # Open chains first start where nothing points in.
    starts = sorted(u for u in nxt if u not in has_prev)
    for s in starts:
        chain = [s]
        remaining.discard(s)
        while chain[-1] in nxt and nxt[chain[-1]] in remaining:
            chain.append(nxt[chain[-1]])
            remaining.discard(chain[-1])
        chains.append(chain)
    while remaining:
        s = min(remaining)
        chain = [s]
        remaining.discard(s)
        while nxt.get(chain[-1]) in remaining:
            chain.append(nxt[chain[-1]])
            remaining.discard(chain[-1])
        chains.append(chain)
    chains.sort(key=min)
    return chains


# --- primitive generators -------------------------------------------------


def tetrahedron() -> Mesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return _orient_outward(Mesh(v, f))


def icosahedron(radius: float = 1.0) -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    v *= radius / np.linalg.norm(v[0])
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return Mesh(v, f)


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> Mesh:
    """Loop-style midpoint subdivision of the icosahedron projected to the sphere."""
    mesh = icosahedron(1.0)
    verts = [tuple(p) for p in mesh.vertices]
    faces = mesh.faces.tolist()
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                p = (np.asarray(verts[i]) + np.asarray(verts[j])) / 2.0
                verts.append(tuple(p / np.linalg.norm(p)))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return Mesh(np.array(verts) * radius, np.array(faces))


def _orient_outward(mesh: Mesh) -> Mesh:
    # Only valid for star-shaped meshes around the centroid.
    c = mesh.vertices.mean(axis=0)
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", n, v.mean(axis=1) - c) < 0
    faces = mesh.faces.copy()
    faces[flip] = faces[flip][:, ::-1]
    return Mesh(mesh.vertices, faces)
