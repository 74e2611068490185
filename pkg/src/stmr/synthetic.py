"""Synthetic hand-like template, linear blend skinning and a flat-shaded rasterizer.

The template stands in for MANO: a palm tube plus five finger tubes (each a
closed, capped cylinder), 778 vertices in total, 16 skeletal nodes with
distance-based skinning weights, and 21 joints (16 nodes + 5 fingertips).

Joint order: 0 wrist; finger ``f`` (0 thumb, 1 index, 2 middle, 3 ring,
4 pinky) owns nodes ``1 + 3f`` (base), ``2 + 3f`` and ``3 + 3f``; fingertip
``f`` is joint ``16 + f``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .mesh_core import Mesh

N_NODES = 16
N_JOINTS = 21
PALM_RINGS, PALM_SEGMENTS = 11, 26
FINGER_RINGS, FINGER_SEGMENTS = 12, 8
CAMERA_DISTANCE = 400.0
FOCAL = CAMERA_DISTANCE / 115.0
SKIN_SIGMA = 9.0


def parent_of(node: int) -> int:
    if node == 0:
        return -1
    return 0 if (node - 1) % 3 == 0 else node - 1


@dataclass
class HandTemplate:
    mesh: Mesh
    skin_weights: np.ndarray  # 778 x 16, rows sum to 1
    nodes: np.ndarray  # 16 x 3 rest positions
    tips: np.ndarray  # 5 x 3 rest fingertip positions
    joint_regressor: np.ndarray  # 21 x 778, rows sum to 1
    finger_axes: np.ndarray  # 5 x 3 rest directions
    flex_axes: np.ndarray  # 5 x 3 flexion axes

    @property
    def joints(self) -> np.ndarray:
        return self.joint_regressor @ self.mesh.vertices

    def fingertip_vertices(self) -> np.ndarray:
        return self.joint_regressor[16:].argmax(axis=1)


def _tube(axis_start, axis_dir, length, radii_a, radii_b, rings, segments, side, cap=0.35):
    """Capped tube along ``axis_dir``; cross sections are ellipses with axes ``side`` and ``n x side``."""
    axis_dir = axis_dir / np.linalg.norm(axis_dir)
    side = side - (side @ axis_dir) * axis_dir
    side /= np.linalg.norm(side)
    other = np.cross(axis_dir, side)
    t = np.linspace(0.0, 1.0, rings)
    theta = 2 * np.pi * np.arange(segments) / segments
    verts = [axis_start - cap * radii_a[0] * axis_dir]
    for k in range(rings):
        centre = axis_start + t[k] * length * axis_dir
        for th in theta:
            verts.append(centre + radii_a[k] * np.cos(th) * side + radii_b[k] * np.sin(th) * other)
    verts.append(axis_start + (length + cap * radii_a[-1]) * axis_dir)
    verts = np.array(verts)
    faces = []
    ring_idx = lambda k, s: 1 + k * segments + (s % segments)
    bottom, top = 0, len(verts) - 1
    for s in range(segments):
        # Winding chosen so normals point away from the axis.
        faces.append([bottom, ring_idx(0, s + 1), ring_idx(0, s)])
        for k in range(rings - 1):
            a, b = ring_idx(k, s), ring_idx(k, s + 1)
            c, d = ring_idx(k + 1, s), ring_idx(k + 1, s + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
        faces.append([top, ring_idx(rings - 1, s), ring_idx(rings - 1, s + 1)])
    return verts, np.array(faces), t * length


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def generate_template(seed: int = 0) -> HandTemplate:
    """Deterministic 778-vertex hand-like template; ``seed`` jitters proportions slightly."""
    rng = np.random.default_rng(seed)
    jitter = lambda n: 1.0 + 0.04 * rng.uniform(-1, 1, size=n)
    palm_len, palm_w, palm_t = 85.0, 42.0, 15.0
    verts_all, faces_all = [], []
    offset = 0
    # palm along +y from the wrist at the origin
    radii = np.full(PALM_RINGS, 1.0)
    radii[0] = radii[-1] = 0.92
    pv, pf, _ = _tube(np.zeros(3), np.array([0.0, 1.0, 0.0]), palm_len, palm_w * radii, palm_t * radii,
                      PALM_RINGS, PALM_SEGMENTS, np.array([1.0, 0.0, 0.0]), cap=0.2)
    verts_all.append(pv)
    faces_all.append(pf)
    offset += len(pv)

    lengths = np.array([62.0, 78.0, 85.0, 80.0, 64.0]) * jitter(5)
    radii_f = np.array([10.0, 8.5, 8.8, 8.3, 7.4])
    bases = np.array([[44.0, 22.0, 4.0], [30.0, 97.0, 0.0], [10.0, 101.0, 0.0], [-10.0, 98.0, 0.0],
                      [-29.0, 92.0, 0.0]])
    dirs = np.array([[0.80, 0.60, 0.0], [0.12, 1.0, 0.0], [0.0, 1.0, 0.0], [-0.10, 1.0, 0.0], [-0.22, 1.0, 0.0]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    flex = np.cross(dirs, np.array([0.0, 0.0, 1.0]))
    flex /= np.linalg.norm(flex, axis=1, keepdims=True)
    nodes = np.zeros((N_NODES, 3))
    tips = np.zeros((5, 3))
    finger_vertex_ranges = []
    ring_params = []
    for f in range(5):
        taper = np.linspace(1.0, 0.78, FINGER_RINGS) * radii_f[f]
        fv, ff, tparam = _tube(bases[f], dirs[f], lengths[f], taper, taper * 0.9, FINGER_RINGS, FINGER_SEGMENTS,
                               np.array([0.0, 0.0, 1.0]))
        verts_all.append(fv)
        faces_all.append(ff + offset)
        finger_vertex_ranges.append((offset, offset + len(fv)))
        ring_params.append(tparam)
        offset += len(fv)
        for k, frac in enumerate((0.0, 0.45, 0.75)):
            nodes[1 + 3 * f + k] = bases[f] + frac * lengths[f] * dirs[f]
        tips[f] = bases[f] + lengths[f] * dirs[f]
    verts = np.concatenate(verts_all)
    faces = np.concatenate(faces_all)
    assert len(verts) == 778, len(verts)

    # Skinning: Gaussian falloff from each bone segment, restricted per part.
    weights = np.zeros((len(verts), N_NODES))
    child_end = np.zeros((N_NODES, 3))
    child_end[0] = nodes[7]  # wrist bone runs to the middle-finger base
    for f in range(5):
        for k in range(3):
            j = 1 + 3 * f + k
            child_end[j] = nodes[j + 1] if k < 2 else tips[f]
    palm_idx = np.arange(len(pv))
    palm_nodes = [0] + [1 + 3 * f for f in range(5)]
    for j in palm_nodes:
        d = _segment_distance(verts[palm_idx], nodes[j], child_end[j]) if j == 0 else \
            np.linalg.norm(verts[palm_idx] - nodes[j], axis=1)
        weights[palm_idx, j] = np.exp(-(d / (3 * SKIN_SIGMA)) ** 2) if j else np.exp(-(d / (4 * SKIN_SIGMA)) ** 2)
    for f, (lo, hi) in enumerate(finger_vertex_ranges):
        idx = np.arange(lo, hi)
        for k in range(3):
            j = 1 + 3 * f + k
            d = _segment_distance(verts[idx], nodes[j], child_end[j])
            weights[idx, j] = np.exp(-(d / SKIN_SIGMA) ** 2)
    weights = np.maximum(weights, 1e-12)
    weights[weights < 1e-6] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)

    # Joint regressor: average of the tube ring nearest each joint; fingertips use cap apexes.
    J = np.zeros((N_JOINTS, len(verts)))
    J[0, 1:1 + PALM_SEGMENTS] = 1.0 / PALM_SEGMENTS
    for f, (lo, hi) in enumerate(finger_vertex_ranges):
        for k, frac in enumerate((0.0, 0.45, 0.75)):
            ring = int(np.argmin(np.abs(ring_params[f] - frac * lengths[f])))
            start = lo + 1 + ring * FINGER_SEGMENTS
            J[1 + 3 * f + k, start:start + FINGER_SEGMENTS] = 1.0 / FINGER_SEGMENTS
        J[16 + f, hi - 1] = 1.0
    return HandTemplate(Mesh(verts, faces), weights, nodes, tips, J, dirs, flex)


def sample_pose(rng: np.random.Generator) -> np.ndarray:
    """Per-node local rotation vectors (16 x 3): finger flexion plus slight spread."""
    return np.stack([rng.uniform(0.0, 1.2, 5), rng.uniform(0.0, 1.4, 5), rng.uniform(0.0, 1.0, 5),
                     rng.uniform(-0.15, 0.15, 5)], axis=1)


def pose_template(template: HandTemplate, pose: np.ndarray) -> np.ndarray:
    """Linear blend skinning of the template for a ``sample_pose`` array (5 x 4)."""
    G = np.tile(np.eye(4), (N_NODES, 1, 1))
    for j in range(1, N_NODES):
        f, k = (j - 1) // 3, (j - 1) % 3
        axis = template.flex_axes[f]
        rot = Rotation.from_rotvec(pose[f, k] * axis)
        if k == 0:
            spread = np.cross(template.finger_axes[f], axis)
            rot = rot * Rotation.from_rotvec(pose[f, 3] * spread)
        local = np.eye(4)
        local[:3, :3] = rot.as_matrix()
        c = template.nodes[j]
        local[:3, 3] = c - local[:3, :3] @ c
        G[j] = G[parent_of(j)] @ local
    V = template.mesh.vertices
    Vh = np.concatenate([V, np.ones((len(V), 1))], axis=1)
    per_node = np.einsum("jab,vb->vja", G[:, :3, :], Vh)
    return np.einsum("vj,vja->va", template.skin_weights, per_node)


def project(points: np.ndarray) -> np.ndarray:
    """Pinhole projection to normalized [-1, 1] image coordinates, camera on the -z side."""
    z = points[..., 2] + CAMERA_DISTANCE
    return FOCAL * points[..., :2] / z[..., None]


def inplane_rotation(theta: float) -> tuple[np.ndarray, np.ndarray]:
    """3-D rotation about the optical axis and the matching 2-D affine map."""
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    T = np.array([[c, -s, 0.0], [s, c, 0.0]])
    return R, T


def render(mesh: Mesh, size: int, colors: np.ndarray | None = None) -> np.ndarray:
    """Flat-shaded z-buffered rendering into an HxWx3 array with values in [0, 1].

    Pixel centers use the same align-corners convention as bilinear sampling:
    column 0 sits at x = -1 and column ``size - 1`` at x = +1.
    """
    V = mesh.vertices
    uv = project(V)
    px = (uv + 1.0) * 0.5 * (size - 1)
    depth = V[:, 2] + CAMERA_DISTANCE
    tri = V[mesh.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    shade = 0.25 + 0.75 * np.abs(n[:, 2])
    if colors is None:
        colors = np.ones((mesh.n_faces, 3))
    image = np.zeros((size, size, 3))
    zbuf = np.full((size, size), np.inf)
    for k, (a, b, c) in enumerate(mesh.faces):
        p = px[[a, b, c]]
        lo = np.maximum(np.ceil(p.min(axis=0)).astype(int), 0)
        hi = np.minimum(np.floor(p.max(axis=0)).astype(int), size - 1)
        if np.any(hi < lo):
            continue
        xs, ys = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1))
        q = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        d = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if abs(d) < 1e-12:
            continue
        w1 = ((q[:, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (q[:, 1] - p[0, 1])) / d
        w2 = ((p[1, 0] - p[0, 0]) * (q[:, 1] - p[0, 1]) - (q[:, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])) / d
        w0 = 1.0 - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * depth[a] + w1 * depth[b] + w2 * depth[c]
        cols, rows = q[inside, 0].astype(int), q[inside, 1].astype(int)
        z = z[inside]
        closer = z < zbuf[rows, cols]
        rows, cols, z = rows[closer], cols[closer], z[closer]
        zbuf[rows, cols] = z
        image[rows, cols] = colors[k] * shade[k]
    return np.clip(image, 0.0, 1.0)


def part_colors(template: HandTemplate) -> np.ndarray:
    """Per-face RGB tint by body part (palm and each finger differ)."""
    palette = np.array([[0.9, 0.75, 0.6], [0.95, 0.3, 0.3], [0.3, 0.9, 0.35], [0.3, 0.45, 0.95],
                        [0.95, 0.85, 0.25], [0.8, 0.35, 0.9]])
    part = np.zeros(template.mesh.n_vertices, dtype=int)
    bounds = np.cumsum([PALM_SEGMENTS * PALM_RINGS + 2] + [FINGER_SEGMENTS * FINGER_RINGS + 2] * 5)
    for p in range(1, 6):
        part[bounds[p - 1]:bounds[p]] = p
    return palette[part[template.mesh.faces[:, 0]]]


@dataclass
class SyntheticSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    gt_mesh: np.ndarray  # 778 x 3, mm, wrist-relative camera frame
    gt_pose2d: np.ndarray  # 21 x 2 normalized
    pair: "SyntheticSample | None" = None
    R: np.ndarray | None = None  # rotation taking this view's mesh to the pair's
    T: np.ndarray | None = None  # 2 x 3 affine taking this view's 2-D joints to the pair's


def make_sample(template: HandTemplate, rng: np.random.Generator, size: int, paired: bool = False,
                colors=None) -> SyntheticSample:
    posed = pose_template(template, sample_pose(rng))
    glob = Rotation.from_euler("zxy", [rng.uniform(-np.pi, np.pi), rng.uniform(-0.5, 0.5),
                                       rng.uniform(-0.5, 0.5)]).as_matrix()
    # Rotate about the rest-pose centroid so the hand stays centered in view.
    V1 = (posed - template.mesh.vertices.mean(axis=0)) @ glob.T
    colors = part_colors(template) if colors is None else colors
    J = template.joint_regressor
    sample = SyntheticSample(render(template.mesh.with_vertices(V1), size, colors), V1, project(J @ V1))
    if paired:
        R, T = inplane_rotation(rng.uniform(-np.pi, np.pi))
        V2 = V1 @ R.T
        sample.pair = SyntheticSample(render(template.mesh.with_vertices(V2), size, colors), V2, project(J @ V2))
        sample.R, sample.T = R, T
    return sample


def generate_dataset(template: HandTemplate, n: int, size: int = 32, paired: bool = False,
                     seed=0) -> list[SyntheticSample]:
    """``n`` samples, each drawn from its own child seed so any subset is reproducible.

    ``seed`` is an int or a ``numpy.random.SeedSequence``.
    """
    colors = part_colors(template)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn(n)
    return [make_sample(template, np.random.default_rng(s), size, paired, colors) for s in seeds]


def stack_samples(samples: list[SyntheticSample]) -> dict:
    """Batch arrays: images [n, 3, H, W], meshes [n, V, 3], pose2d [n, 21, 2] (+ pair keys)."""
    out = {
        "images": np.stack([s.image.transpose(2, 0, 1) for s in samples]),
        "meshes": np.stack([s.gt_mesh for s in samples]),
        "pose2d": np.stack([s.gt_pose2d for s in samples]),
    }
    if samples and all(s.pair is not None for s in samples):
        out["images2"] = np.stack([s.pair.image.transpose(2, 0, 1) for s in samples])
        out["meshes2"] = np.stack([s.pair.gt_mesh for s in samples])
        out["pose2d2"] = np.stack([s.pair.gt_pose2d for s in samples])
        out["R"] = np.stack([s.R for s in samples])
        out["T"] = np.stack([s.T for s in samples])
    return out


def save_dataset(path, arrays: dict) -> None:
    np.savez(path, **arrays)


def load_dataset(path) -> dict:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}
