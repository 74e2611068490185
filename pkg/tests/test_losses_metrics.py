import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from stmr import losses
from stmr.losses import LossWeights, TERMS, consistency_losses, edge_loss, mesh_and_pose_loss, normal_loss, total_loss
from stmr.mesh_core import face_unit_normals, icosphere
from stmr.metrics import (METRIC_KEYS, DegenerateAlignment, f_score, metrics_report, mpjpe_mpvpe, pck_auc,
                          point_errors, procrustes_align)
from stmr.tensor import Tensor, precision


def _mesh_batch(seed=0):
    mesh = icosphere(2)
    rng = np.random.default_rng(seed)
    V = (mesh.vertices * 40)[None] + rng.normal(scale=0.5, size=(2, mesh.n_vertices, 3))
    return mesh, V


# --- losses ---------------------------------------------------------------------


def test_mesh_and_pose_loss_values():
    V = np.random.default_rng(0).normal(size=(2, 10, 3))
    P = np.random.default_rng(1).normal(size=(2, 21, 2))
    a, b = mesh_and_pose_loss(V, V, P, P)
    assert a.item() == 0 and b.item() == 0
    a, b = mesh_and_pose_loss(V + 1, V, P - 1, P)
    assert a.item() == pytest.approx(1.0) and b.item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mesh_and_pose_loss(V, V[:, :5], P, P)


def test_mesh_loss_gradient_is_sign():
    with precision(np.float64):
        rng = np.random.default_rng(0)
        gt = rng.normal(size=(1, 6, 3))
        V = Tensor(gt + rng.choice([-1, 1], size=gt.shape) * rng.uniform(0.1, 1, size=gt.shape), requires_grad=True)
        mesh_and_pose_loss(V, gt, np.zeros((1, 1, 2)), np.zeros((1, 1, 2)))[0].backward()
        assert np.abs(V.grad - np.sign(V.data - gt) / gt.size).max() < 1e-12


def test_normal_loss_zero_at_gt_and_extremum():
    mesh, V = _mesh_batch()
    n_gt = np.stack([face_unit_normals(mesh.with_vertices(v)) for v in V])
    with precision(np.float64):
        assert normal_loss(Tensor(V), mesh.faces, n_gt).item() < 1e-6
    # A single triangle whose one edge lies along its "normal" contributes 1 for that edge.
    tri = np.array([[[0.0, 0, 0], [0, 0, 1], [1, 0, 0]]])
    n = np.array([[[0.0, 0, 1]]])
    val = normal_loss(Tensor(tri), np.array([[0, 1, 2]]), n).item()
    assert val == pytest.approx((1 + 1 / np.sqrt(2) + 0) / 3, abs=1e-6)


def test_normal_loss_skips_zero_edges():
    tri = np.zeros((1, 3, 3))
    tri[0, 2] = [1.0, 0, 0]
    diag = {}
    val = normal_loss(Tensor(tri), np.array([[0, 1, 2]]), np.array([[[0.0, 0, 1]]]), diag)
    assert diag["zero_length_edges"] == 1
    assert np.isfinite(val.item()) and val.item() == 0


def test_edge_loss_values():
    mesh, V = _mesh_batch()
    assert edge_loss(Tensor(V), V, mesh.faces).item() < 1e-5
    f = mesh.faces
    lengths = np.linalg.norm(V[:, f[:, [0, 1, 2]]] - V[:, f[:, [1, 2, 0]]], axis=-1)
    with precision(np.float64):
        assert edge_loss(Tensor(2 * V), V, mesh.faces).item() == pytest.approx(lengths.mean(), rel=1e-9)
    with pytest.raises(ValueError):
        edge_loss(Tensor(V), V[:1], mesh.faces)


def test_consistency_losses_values():
    rng = np.random.default_rng(0)
    R = Rotation.random(random_state=1).as_matrix()
    V1 = rng.normal(size=(1, 30, 3))
    P1 = rng.uniform(-1, 1, size=(1, 21, 2))
    T_id = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    with precision(np.float64):
        c3, c2 = consistency_losses(R, T_id, V1, V1 @ R.T, P1, P1)
        assert c3.item() < 1e-12 and c2.item() == 0
        c3, _ = consistency_losses(R, T_id, V1, V1 @ R.T + 0.1, P1, P1)
        assert c3.item() == pytest.approx(0.1, abs=1e-12)


def test_total_loss_weights():
    assert total_loss({}) == 0
    assert total_loss({"normal": 1.0}) == 0.05
    assert total_loss({"edge": 1.0}) == 0.5
    singles = [total_loss({t: 1.0}) for t in TERMS]
    assert singles == [1, 1, 0.05, 0.5, 1, 1]
    assert total_loss({t: 1.0 for t in TERMS}) == pytest.approx(4.55)
    assert total_loss({"normal": 2.0}, LossWeights(normal=0.25)) == 0.5
    with pytest.raises(KeyError):
        total_loss({"mesh3d": 1.0})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=6, max_size=6), st.integers(0, 5), st.floats(0, 5))
def test_total_loss_is_linear(values, k, extra):
    terms = dict(zip(TERMS, values))
    bumped = dict(terms)
    bumped[TERMS[k]] += extra
    weight = [1, 1, 0.05, 0.5, 1, 1][k]
    assert total_loss(bumped) - total_loss(terms) == pytest.approx(weight * extra, abs=1e-9)


# --- metrics --------------------------------------------------------------------


def test_procrustes_cases():
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(20, 3))
    assert np.abs(procrustes_align(Y, Y) - Y).max() < 1e-9
    R = Rotation.random(random_state=2).as_matrix()
    X = 2.5 * Y @ R.T + np.array([1.0, -3.0, 7.0])
    assert np.abs(procrustes_align(X, Y) - Y).max() < 1e-6
    for s in range(10):
        A, B = np.random.default_rng(s).normal(size=(2, 10, 3))
        assert np.linalg.norm(procrustes_align(A, B) - B) <= np.linalg.norm(A - B) + 1e-12


def test_procrustes_excludes_reflection():
    Y = np.random.default_rng(0).normal(size=(12, 3))
    X = Y * np.array([1, 1, -1])
    aligned = procrustes_align(X, Y)
    A = aligned - aligned.mean(0)
    Xc = X - X.mean(0)
    M = np.linalg.lstsq(Xc, A, rcond=None)[0]
    assert np.linalg.det(M) > 0


def test_procrustes_degenerate():
    with pytest.raises(DegenerateAlignment):
        procrustes_align(np.zeros((5, 3)), np.ones((5, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateAlignment):
        procrustes_align(line, np.random.default_rng(0).normal(size=(5, 3)))


def test_mpjpe_cases():
    gt = np.random.default_rng(0).normal(size=(2, 21, 3)) * 30
    assert mpjpe_mpvpe(gt, gt) == 0
    shifted = gt + np.array([3.0, 0, 0])
    assert mpjpe_mpvpe(shifted, gt) == pytest.approx(3.0)
    assert mpjpe_mpvpe(shifted, gt, aligned=True) < 1e-9
    with pytest.raises(ValueError):
        mpjpe_mpvpe(gt, gt[:, :5])


def test_pa_error_similarity_invariance():
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(21, 3)) * 30
    pred = gt + rng.normal(size=(21, 3)) * 5
    base = mpjpe_mpvpe(pred, gt, aligned=True)
    for s in range(10):
        R = Rotation.random(random_state=s).as_matrix()
        moved = rng.uniform(0.5, 2) * pred @ R.T + rng.normal(size=3) * 100
        assert abs(mpjpe_mpvpe(moved, gt, aligned=True) - base) < 1e-6


def test_pck_auc_cases():
    assert pck_auc(np.zeros(21)) == 1.0
    assert pck_auc(np.full(21, 60.0)) == 0.0
    grid = np.linspace(0, 50, 1001)
    # One grid step, normalized by the 50 mm range, bounds the discretization error.
    assert abs(pck_auc([25.0], grid) - 0.5) <= 0.05 / 50
    assert abs(pck_auc([25.0]) - 0.5) <= 0.5 / 50
    with pytest.raises(ValueError):
        pck_auc([1.0], [5.0])
    with pytest.raises(ValueError):
        pck_auc([1.0], [5.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 80), min_size=1, max_size=30), st.floats(0, 1))
def test_pck_auc_monotone(errors, shrink):
    e = np.array(errors)
    assert pck_auc(e * shrink) >= pck_auc(e)


def test_f_score_cases():
    grid = np.stack(np.meshgrid(*[np.arange(4) * 50.0] * 3), -1).reshape(-1, 3)
    assert f_score(grid, grid, 5) == 1.0 and f_score(grid, grid, 15) == 1.0
    moved = grid + np.array([10.0, 0, 0])
    assert f_score(moved, grid, 5) == 0.0
    assert f_score(moved, grid, 15) == 1.0
    assert f_score(grid + 1000, grid, 15) == 0.0


def test_metrics_report_identity():
    rng = np.random.default_rng(0)
    verts = rng.normal(size=(3, 50, 3)) * 40
    joints = rng.normal(size=(3, 21, 3)) * 40
    report = metrics_report(verts, verts, joints, joints)
    assert tuple(report) == METRIC_KEYS
    assert report["pa_mpjpe"] < 1e-9 and report["mpvpe"] == 0
    assert report["auc_3d"] == 1.0 and report["f5"] == 1.0 and report["f15"] == 1.0
    assert point_errors(verts, verts).shape == (3, 50)
