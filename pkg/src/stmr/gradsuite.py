"""Finite-difference checks for every differentiable kernel and a toy end-to-end model.

Each case builds float64 inputs and a scalar function of them; the suite
compares reverse-mode gradients against central differences.
"""

from __future__ import annotations

import time

import numpy as np
import scipy.sparse as sp

from . import losses
from .hierarchy import build_hierarchy
from .mesh_core import face_unit_normals, icosahedron
from .model import STMR, SWMSA, SpiralTransformerBlock, build_ppvl_matrix, toy_config
from .spiral import build_spiral_table
from .tensor import Tensor, check_gradients, check_gradients_joint, ops, precision

KERNEL_TOL = 1e-4
MODEL_TOL = 1e-3


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # A fixed random weighting keeps reductions from hiding sign errors.
    return (out * Tensor(w)).sum()


def _kernel_cases(rng: np.random.Generator) -> dict:
    r = lambda *s: Tensor(rng.normal(size=s), requires_grad=True)
    pos = lambda *s: Tensor(rng.uniform(0.5, 2.0, size=s), requires_grad=True)
    away = lambda *s: Tensor(rng.choice([-1, 1], size=s) * rng.uniform(0.3, 1.5, size=s), requires_grad=True)
    cases = {}

    def wrap(out_fn):
        w = rng.normal(size=out_fn().shape)
        return lambda: _weighted(out_fn(), w)

    def unary(name, op, maker, shape=(3, 4)):
        x = maker(*shape)
        cases[name] = (wrap(lambda: op(x)), [x])

    unary("exp", ops.exp, r)
    unary("log", ops.log, pos)
    unary("sqrt", ops.sqrt, pos)
    unary("abs", ops.absolute, away)
    unary("tanh", ops.tanh, r)
    unary("relu", ops.relu, away)
    unary("gelu", ops.gelu, r)
    unary("power", lambda t: ops.power(t, 3.0), r)
    unary("neg", ops.neg, r)

    a, b = r(2, 3, 4), r(3, 1)
    w = rng.normal(size=(2, 3, 4))
    cases["add_broadcast"] = (lambda: _weighted(a + b, w), [a, b])
    cases["sub_broadcast"] = (lambda: _weighted(a - b, w), [a, b])
    cases["mul_broadcast"] = (lambda: _weighted(a * b, w), [a, b])
    d = pos(3, 1)
    cases["div_broadcast"] = (lambda: _weighted(a / d, w), [a, d])

    x = r(2, 3, 4)
    cases["sum_axis"] = (wrap(lambda: x.sum(axis=1)), [x])
    cases["mean_keepdims"] = (wrap(lambda: ops.mean(x, axis=-1, keepdims=True)), [x])
    cases["reshape_transpose"] = (wrap(lambda: x.reshape(4, 6).transpose((1, 0))), [x])
    y = r(2, 3, 2)
    cases["concat"] = (wrap(lambda: ops.concat([x, y], axis=-1)), [x, y])
    cases["getitem"] = (wrap(lambda: x[:, 1:, ::2]), [x])

    m1, m2 = r(2, 3, 4), r(4, 5)
    cases["matmul_batched"] = (wrap(lambda: ops.matmul(m1, m2)), [m1, m2])
    lx, lw, lb = r(2, 5, 4), r(4, 3), r(3)
    cases["linear"] = (wrap(lambda: ops.linear(lx, lw, lb)), [lx, lw, lb])
    S = sp.random(6, 4, density=0.5, random_state=1, format="csr")
    sx = r(2, 4, 3)
    cases["sparse_apply"] = (wrap(lambda: ops.sparse_apply(S, sx)), [sx])
    sm = r(2, 3, 5)
    cases["softmax"] = (wrap(lambda: ops.softmax_lastdim(sm)), [sm])
    ln_x, g, bb = r(2, 3, 6), r(6), r(6)
    cases["layer_norm"] = (wrap(lambda: ops.layer_norm(ln_x, g, bb)), [ln_x, g, bb])
    gx = r(2, 5, 3)
    idx = np.array([[0, 1, -1], [4, 4, 2], [3, -1, -1]])
    cases["gather_rows"] = (wrap(lambda: ops.gather_rows(gx, idx)), [gx])
    cx, cw, cb = r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)
    cases["conv2d"] = (wrap(lambda: ops.conv2d(cx, cw, cb, stride=2, padding=1)), [cx, cw, cb])
    ux = r(1, 2, 3, 3)
    cases["upsample2x"] = (wrap(lambda: ops.upsample2x(ux)), [ux])
    fm = r(2, 3, 5, 5)
    pts = Tensor(rng.uniform(-0.9, 0.9, size=(2, 4, 2)), requires_grad=True)
    cases["bilinear_sample"] = (wrap(lambda: ops.bilinear_sample(fm, pts)), [fm, pts])

    mesh = icosahedron(1.0)
    faces = mesh.faces
    V = Tensor(mesh.vertices[None] + 0.05 * rng.normal(size=(1, 12, 3)), requires_grad=True)
    n_gt = face_unit_normals(mesh)[None]
    cases["normal_loss"] = (lambda: losses.normal_loss(V, faces, n_gt), [V])
    Vg = mesh.vertices[None] * 1.1
    cases["edge_loss"] = (lambda: losses.edge_loss(V, Vg, faces), [V])
    P1, P2 = r(1, 21, 2), r(1, 21, 2)
    Vb = r(1, 12, 3)
    R = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    T = rng.normal(size=(2, 3))
    cases["consistency"] = (lambda: sum(losses.consistency_losses(R, T, V, Vb, P1, P2)), [V, Vb, P1, P2])
    table = build_spiral_table(mesh, 4)
    attn = SWMSA(8, 2, table, rng)
    tok = r(2, 12, 8)
    # The key bias adds the same logit to every key, so softmax cancels it and
    # its exact gradient is zero; finite differences would only measure noise.
    attn_params = [p for p in attn.parameters() if p is not attn.k.bias]
    cases["sw_msa"] = (wrap(lambda: attn(tok)), [tok] + attn_params)
    block = SpiralTransformerBlock(8, 2, table, rng)
    block_params = [p for p in block.parameters() if p is not block.attn.k.bias]
    cases["spiral_transformer_block"] = (wrap(lambda: block(tok)), [tok] + block_params)
    return cases


def kernel_report(seed: int = 0, max_entries: int = 20) -> dict:
    """Relative error per kernel (float64, central differences)."""
    with precision(np.float64):
        cases = _kernel_cases(np.random.default_rng(seed))
        return {name: check_gradients(fn, tensors, h=1e-5, max_entries=max_entries, seed=seed)
                for name, (fn, tensors) in cases.items()}


def toy_model(seed: int = 0):
    """Small end-to-end model: icosahedron levels [12, 6], C=8, K=4, 32 px images."""
    rng = np.random.default_rng(seed)
    template = icosahedron(50.0)
    hierarchy = build_hierarchy(template, num_levels=1, K=4)
    cfg = toy_config(level_channels=(8, 8), heads=2, K=4, encoder_channels=(4, 4, 8, 8, 8),
                     regressor_hidden=8, mspfe_hidden=8)
    skin = rng.dirichlet(np.full(16, 0.3), size=template.n_vertices)
    lift = build_ppvl_matrix(skin, hierarchy.coarse_index_map(), [[0], [1], [2], [3], [4, 5]])
    model = STMR(cfg, hierarchy, lift, rng)
    return model, template, hierarchy


def model_report(seed: int = 0, max_entries: int = 3) -> dict:
    """One joint relative error over sampled entries of every parameter and the input image."""
    with precision(np.float64):
        model, template, _ = toy_model(seed)
        rng = np.random.default_rng(seed + 1)
        image = Tensor(rng.uniform(0, 1, size=(2, 3, 32, 32)), requires_grad=True)
        V_gt = template.vertices[None].repeat(2, axis=0) / 100.0 * 1.05
        n_gt = face_unit_normals(template)[None].repeat(2, axis=0)
        P_gt = rng.uniform(-0.5, 0.5, size=(2, 21, 2))
        faces = template.faces

        def fn():
            P, V = model(image)
            mesh, pose = losses.mesh_and_pose_loss(V, V_gt, P, P_gt)
            terms = {"mesh": mesh, "pose2d": pose, "normal": losses.normal_loss(V, faces, n_gt),
                     "edge": losses.edge_loss(V, V_gt, faces)}
            return losses.total_loss(terms)

        params = model.parameters()
        err = check_gradients_joint(fn, params + [image], h=1e-6, max_entries=max_entries, seed=seed)
        reached = [p.name for p in params if p.grad is not None and np.any(p.grad != 0)]
        return {"end_to_end": err, "parameters": len(params), "parameters_with_gradient": len(reached)}


def run_suite(seed: int = 0) -> dict:
    t = time.perf_counter()
    kernels = kernel_report(seed)
    model = model_report(seed)
    ok = max(kernels.values()) < KERNEL_TOL and model["end_to_end"] < MODEL_TOL
    return {"kernels": kernels, "model": model, "kernel_tolerance": KERNEL_TOL, "model_tolerance": MODEL_TOL,
            "passed": bool(ok), "seconds": time.perf_counter() - t}
