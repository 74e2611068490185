import numpy as np
import pytest

from stmr.gradsuite import toy_model
from stmr.hierarchy import build_hierarchy
from stmr.mesh_core import icosahedron, icosphere
from stmr.model import (MSPFE, PPVL, STMR, SWMSA, Encoder, FeaturePyramid, JointRegressor2D, LiftMatrix,
                        SpiralTransformerBlock, build_ppvl_matrix, positional_encoding, toy_config)
from stmr.model.ppvl import SKIN_THRESHOLD
from stmr.spiral import SpiralTable, build_spiral_table
from stmr.tensor import Adam, Tensor, no_grad, precision
from stmr.training import fingertip_neighbors


def _template_model(template, hierarchy, **cfg):
    config = toy_config(**cfg)
    lift = build_ppvl_matrix(template.skin_weights, hierarchy.coarse_index_map(),
                             fingertip_neighbors(template, hierarchy))
    return STMR(config, hierarchy, lift, np.random.default_rng(0))


# --- encoder and 2-D branch ---------------------------------------------------


def test_encoder_stride_contract():
    cfg = toy_config(image_size=128, encoder_channels=(16, 32, 64, 128, 256))
    pyr = Encoder(cfg, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 128, 128))))
    assert [m.shape[2] for m in pyr.encoder] == [64, 32, 16, 8, 4]
    assert pyr.encoder[4].shape == (1, 256, 4, 4)
    assert pyr.d3.shape == (1, 128, 8, 8) and pyr.d2.shape == (1, 64, 16, 16)
    with pytest.raises(ValueError):
        Encoder(cfg, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 100, 100))))


def test_encoder_batch_independence_and_reachability():
    cfg = toy_config()
    enc = Encoder(cfg, np.random.default_rng(0))
    enc.assign_names()
    img = np.random.default_rng(1).uniform(size=(1, 3, 32, 32))
    pyr = enc(Tensor(np.concatenate([img, img])))
    assert np.array_equal(pyr.d2.data[0], pyr.d2.data[1])
    pyr.d2.sum().backward()
    assert np.any(enc.stages[0].weight.grad != 0)


def test_joint_regressor_range_and_shape():
    cfg = toy_config()
    reg = JointRegressor2D(cfg, np.random.default_rng(0))
    out = reg(Tensor(np.random.default_rng(1).normal(size=(2, 16, 4, 4)) * 50))
    assert out.shape == (2, 21, 2)
    assert np.all(np.abs(out.data) <= 1)


def test_mspfe_width_and_constant_maps():
    cfg = toy_config()
    c = cfg.encoder_channels
    m = MSPFE(cfg, np.random.default_rng(0))
    assert m.in_width == c[0] + c[1] + c[2] + c[3] + c[4] + c[3] + c[2]
    assert MSPFE(cfg, np.random.default_rng(0), multi_scale=False).in_width == c[2]
    sizes = [16, 8, 4, 2, 1]
    const = lambda ch, s: Tensor(np.full((1, ch, s, s), 0.7))
    pyr = FeaturePyramid([const(ch, s) for ch, s in zip(c, sizes)], const(c[3], 2), const(c[2], 4))
    rng = np.random.default_rng(2)
    a = m(pyr, Tensor(rng.uniform(-1, 1, size=(1, 21, 2)))).data
    b = m(pyr, Tensor(rng.uniform(-1, 1, size=(1, 21, 2)))).data
    assert np.allclose(a, a[:, :1]) and np.allclose(a, b)


def test_mspfe_pose_gradient_on_varying_maps():
    cfg = toy_config()
    m = MSPFE(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(3)
    sizes = [16, 8, 4, 2, 1]
    rand = lambda ch, s: Tensor(rng.normal(size=(1, ch, s, s)))
    c = cfg.encoder_channels
    pyr = FeaturePyramid([rand(ch, s) for ch, s in zip(c, sizes)], rand(c[3], 2), rand(c[2], 4))
    pose = Tensor(rng.uniform(-0.8, 0.8, size=(1, 21, 2)), requires_grad=True)
    m(pyr, pose).sum().backward()
    assert np.abs(pose.grad).max() > 0


# --- PPVL ---------------------------------------------------------------------


def test_ppvl_matrix_on_template(template, hierarchy):
    idx = hierarchy.coarse_index_map()
    tips = fingertip_neighbors(template, hierarchy)
    lift = build_ppvl_matrix(template.skin_weights, idx, tips)
    assert lift.shape == (49, 21)
    head = lift.values[:, :16]
    assert np.array_equal(head != 0, template.skin_weights[idx] > SKIN_THRESHOLD)
    assert set(np.unique(lift.values[:, 16:])) <= {0.0, 0.2}
    for f, nbrs in enumerate(tips):
        assert np.all(lift.values[nbrs, 16 + f] == 0.2)


def test_ppvl_threshold_and_errors():
    W = np.full((3, 16), 1 / 16)
    W[1] = 0.0
    W[1, :2] = [0.85, 0.15]
    lift = build_ppvl_matrix(W, [0, 1, 2], [[0]] * 5)
    assert np.all(lift.values[0, :16] == 0)  # max weight 1/16
    assert lift.values[1, 0] == 0.85 and lift.values[1, 1] == 0
    low = W.copy()
    low[1] = np.r_[0.15, np.full(15, 0.85 / 15)]  # max weight 0.15
    assert np.all(build_ppvl_matrix(low, [0, 1, 2], [[0]] * 5).values[1, :16] == 0)
    with pytest.raises(IndexError):
        build_ppvl_matrix(W, [0, 3], [[0]] * 5)
    with pytest.raises(ValueError):
        build_ppvl_matrix(W, [0, 1], [[0], [], [1], [0], [1]])


def test_ppvl_lift_cases():
    sel = np.zeros((4, 3))
    sel[[0, 1, 2, 3], [2, 0, 1, 2]] = 1
    layer = PPVL(LiftMatrix(sel, sel > 0))
    F = np.random.default_rng(0).normal(size=(2, 3, 5))
    assert np.allclose(layer(Tensor(F)).data, F[:, [2, 0, 1, 2]], atol=1e-6)
    assert np.all(layer(Tensor(np.zeros((2, 3, 5)))).data == 0)
    layer(Tensor(F)).sum().backward()
    assert np.all(layer.matrix.grad[~layer.mask] == 0)
    assert np.any(layer.matrix.grad[layer.mask] != 0)


def test_ppvl_structural_zeros_survive_training():
    with precision(np.float64):
        model, template, _ = toy_model(0)
        opt = Adam(model.parameters(), lr=1e-2)
        rng = np.random.default_rng(5)
        for _ in range(100):
            opt.zero_grad()
            _, V = model(Tensor(rng.uniform(size=(2, 3, 32, 32))))
            ((V - Tensor(rng.normal(size=V.shape))) ** 2).mean().backward()
            assert np.all(model.ppvl.matrix.grad[~model.structural_mask] == 0)
            opt.step()
        assert np.all(model.ppvl.matrix.data[~model.structural_mask] == 0)
        assert (~model.structural_mask).any()


# --- SW-MSA and blocks --------------------------------------------------------


def _tokens(V, C, seed=0, B=2):
    return Tensor(np.random.default_rng(seed).normal(size=(B, V, C)))


@pytest.mark.parametrize("K", [4, 9, 25])
def test_attention_rows_sum_to_one(K):
    mesh = icosphere(1)
    table = build_spiral_table(mesh, K)
    attn = SWMSA(8, 2, table, np.random.default_rng(0))
    attn(_tokens(mesh.n_vertices, 8))
    A = attn.last_attention
    assert np.abs(A.sum(-1) - 1).max() < 1e-6
    assert np.all(A[:, table.pad_mask] == 0) if table.pad_mask.any() else True


def test_attention_padding_gets_zero_weight():
    table = SpiralTable(np.array([[0, 1, -1], [1, 0, -1], [2, 1, 0]]))
    attn = SWMSA(4, 2, table, np.random.default_rng(0))
    attn(_tokens(3, 4))
    A = attn.last_attention  # [B, V, M, K]
    assert np.all(A[:, :2, :, 2] == 0)
    assert np.abs(A.sum(-1) - 1).max() < 1e-6


def test_single_key_attention_is_projection_composition():
    table = SpiralTable(np.arange(12)[:, None])
    with precision(np.float64):
        attn = SWMSA(8, 2, table, np.random.default_rng(0))
        x = _tokens(12, 8)
        out = attn(x).data
        assert np.all(attn.last_attention == 1.0)
        expected = attn.proj(attn.v(x)).data
    assert np.abs(out - expected).max() < 1e-12


def _relabel(table: SpiralTable, perm: np.ndarray) -> SpiralTable:
    # New vertex i is old vertex perm[i]; entries map old ids to new ids.
    inv = np.argsort(perm)
    old = table.indices[perm]
    return SpiralTable(np.where(old >= 0, inv[np.maximum(old, 0)], old))


def test_permutation_equivariance():
    mesh = icosphere(1)
    table = build_spiral_table(mesh, 9)
    x = _tokens(mesh.n_vertices, 8)
    with precision(np.float64):
        x = Tensor(x.data.astype(np.float64))
        base = SWMSA(8, 2, table, np.random.default_rng(0))
        y = base(x).data
        for s in range(10):
            perm = np.random.default_rng(100 + s).permutation(mesh.n_vertices)
            other = SWMSA(8, 2, _relabel(table, perm), np.random.default_rng(0))
            y_p = other(Tensor(x.data[:, perm])).data
            assert np.abs(y_p - y[:, perm]).max() < 1e-6


def test_attention_locality():
    mesh = icosphere(2)
    table = build_spiral_table(mesh, 9)
    attn = SWMSA(8, 2, table, np.random.default_rng(0))
    x = _tokens(mesh.n_vertices, 8).data
    v = 17
    masked = np.zeros_like(x)
    window = table.indices[v][table.indices[v] >= 0]
    masked[:, window] = x[:, window]
    assert np.array_equal(attn(Tensor(x)).data[:, v], attn(Tensor(masked)).data[:, v])


def test_dense_path_matches_full_table():
    table = SpiralTable.full(12)
    with precision(np.float64):
        a = SWMSA(8, 2, table, np.random.default_rng(0))
        b = SWMSA(8, 2, table, np.random.default_rng(0), dense=True)
        x = Tensor(_tokens(12, 8).data.astype(np.float64))
        assert np.abs(a(x).data - b(x).data).max() < 1e-12


def test_block_identity_with_zeroed_outputs():
    table = build_spiral_table(icosahedron(), 4)
    block = SpiralTransformerBlock(8, 2, table, np.random.default_rng(0))
    for p in (block.attn.proj.weight, block.attn.proj.bias, block.mlp.fc2.weight, block.mlp.fc2.bias):
        p.data[...] = 0
    x = _tokens(12, 8)
    out = block(x)
    assert out.shape == x.shape
    assert np.array_equal(out.data, x.data)


def test_swmsa_rejects_bad_shapes():
    table = build_spiral_table(icosahedron(), 4)
    with pytest.raises(ValueError):
        SWMSA(6, 4, table, np.random.default_rng(0))
    with pytest.raises(ValueError):
        SWMSA(8, 2, table, np.random.default_rng(0))(_tokens(11, 8))


def test_positional_encoding():
    pe = positional_encoding(1000, 16)
    assert np.all(pe[0, 0::2] == 0) and np.all(pe[0, 1::2] == 1)
    assert np.abs(pe).max() <= 1
    assert pe[3, 4] == pytest.approx(np.sin(3 / 10000 ** (4 / 16)))
    assert pe[3, 5] == pytest.approx(np.cos(3 / 10000 ** (4 / 16)))
    assert len(np.unique(pe.round(12), axis=0)) == 1000
    with pytest.raises(ValueError):
        positional_encoding(5, 7)


# --- full model ---------------------------------------------------------------


def test_full_model_shapes_and_token_counts(template, hierarchy):
    model = _template_model(template, hierarchy)
    model.eval()
    img = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
    with no_grad():
        pose, V = model(img)
        pose2, V2 = model(img)
    assert pose.shape == (2, 21, 2) and V.shape == (2, 778, 3)
    assert model.mesh_regressor.token_counts == [49, 98, 195, 389, 778]
    assert np.array_equal(V.data, V2.data) and np.array_equal(pose.data, pose2.data)
    with pytest.raises(ValueError):
        model(Tensor(np.zeros((1, 3, 64, 64))))


def test_model_config_mismatch(hierarchy):
    with pytest.raises(ValueError):
        STMR(toy_config(level_channels=(16, 16)), hierarchy, None, np.random.default_rng(0))
    with pytest.raises(ValueError):
        STMR(toy_config(K=4), hierarchy, None, np.random.default_rng(0))


@pytest.mark.parametrize("decoder", ["sw_msa", "global_msa", "spiral_conv", "depthwise_conv"])
def test_every_parameter_receives_gradient(decoder):
    with precision(np.float64):
        model, template, _ = toy_model(0)
        if decoder != "sw_msa":
            h = build_hierarchy(template, num_levels=1, K=4)
            skin = np.random.default_rng(0).dirichlet(np.full(16, 0.3), size=12)
            lift = build_ppvl_matrix(skin, h.coarse_index_map(), [[0], [1], [2], [3], [4, 5]])
            cfg = toy_config(level_channels=(8, 8), heads=2, K=4, encoder_channels=(4, 4, 8, 8, 8),
                             regressor_hidden=8, mspfe_hidden=8, decoder=decoder)
            model = STMR(cfg, h, lift, np.random.default_rng(0))
        pose, V = model(Tensor(np.random.default_rng(1).uniform(size=(2, 3, 32, 32))))
        (V * Tensor(np.random.default_rng(2).normal(size=V.shape))).sum().backward()
        (pose * pose).sum().backward()
        missing = [n for n, p in model.named_parameters()
                   if p.grad is None or not np.any(p.grad[model.structural_mask] if n == "ppvl.matrix" else p.grad)]
        # The key bias only shifts all logits of a row equally; softmax removes it.
        assert all(n.endswith("attn.k.bias") for n in missing), missing


def test_key_bias_gradient_vanishes():
    # Adding the same bias to every key shifts each logit row by a constant,
    # which softmax ignores; this is why gradient checks skip that parameter.
    table = build_spiral_table(icosphere(1), 9)
    with precision(np.float64):
        attn = SWMSA(8, 2, table, np.random.default_rng(0))
        attn.assign_names()
        x = Tensor(np.random.default_rng(1).normal(size=(2, table.V, 8)))
        (attn(x) * Tensor(np.random.default_rng(2).normal(size=(2, table.V, 8)))).sum().backward()
        assert np.abs(attn.k.bias.grad).max() < 1e-12
        assert np.abs(attn.q.bias.grad).max() > 1e-6
