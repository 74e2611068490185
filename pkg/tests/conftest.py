import numpy as np
import pytest
from scipy.spatial import ConvexHull

from stmr.mesh_core import Mesh, build_adjacency, icosahedron, icosphere


def bfs_layers(mesh: Mesh, v: int, depth: int) -> list[set]:
    """Independent ring oracle: breadth-first layering over the raw face list."""
    nbrs = {i: set() for i in range(mesh.n_vertices)}
    for a, b, c in mesh.faces:
        for x, y in ((a, b), (b, c), (c, a)):
            nbrs[int(x)].add(int(y))
            nbrs[int(y)].add(int(x))
    dist = {v: 0}
    frontier = [v]
    while frontier:
        nxt = []
        for u in frontier:
            for w in nbrs[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    nxt.append(w)
        frontier = nxt
    return [{u for u, d in dist.items() if d == h} for h in range(depth + 1)]


def random_sphere_mesh(seed: int, n: int | None = None) -> Mesh:
    """Closed genus-0 triangle mesh: convex hull of random points on the unit sphere, outward wound."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(10, 60))
    p = rng.normal(size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    hull = ConvexHull(p)
    faces = hull.simplices.copy()
    for k, (a, b, c) in enumerate(faces):
        if np.dot(np.cross(p[b] - p[a], p[c] - p[a]), p[a] + p[b] + p[c]) < 0:
            faces[k] = (a, c, b)
    used = np.unique(faces)
    remap = -np.ones(n, dtype=int)
    remap[used] = np.arange(len(used))
    return Mesh(p[used], remap[faces])


@pytest.fixture(scope="session")
def test_meshes():
    meshes = [icosahedron()] + [icosphere(s) for s in (1, 2, 3)]
    meshes += [random_sphere_mesh(s) for s in range(20)]
    return meshes


@pytest.fixture(scope="session")
def template():
    from stmr.synthetic import generate_template
    return generate_template(0)


@pytest.fixture(scope="session")
def hierarchy(template):
    from stmr.hierarchy import build_hierarchy
    return build_hierarchy(template.mesh)


# Acceptance lines collected by test_acceptance.py, echoed after the run.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
