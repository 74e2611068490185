import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import erf

from stmr.tensor import (Adam, Linear, Module, OptimizerState, Parameter, Tensor, adam_step, backward,
                         bilinear_sample, check_gradients, conv2d, gather_rows, gelu, layer_norm, load_records,
                         matmul, no_grad, ops, precision, save_records, softmax_lastdim, sparse_apply, step_lr,
                         upsample2x)
from stmr.gradsuite import KERNEL_TOL, kernel_report


def test_kernel_gradients_all_below_tolerance():
    report = kernel_report(seed=0)
    bad = {k: v for k, v in report.items() if not v < KERNEL_TOL}
    assert not bad, bad
    assert {"matmul_batched", "softmax", "layer_norm", "gelu", "bilinear_sample", "gather_rows",
            "conv2d", "sparse_apply"} <= set(report)


def test_matmul_identity_and_hand_values():
    A = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(Tensor(A), Tensor(np.eye(3))).data, A)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_small():
    with precision(np.float64):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        assert check_gradients(lambda: matmul(a, b).sum(), [a, b]) < 1e-4


def test_softmax_values():
    assert np.allclose(softmax_lastdim(Tensor(np.full((2, 4), 3.0))).data, 0.25)
    out = softmax_lastdim(Tensor(np.array([[0.0, -np.inf]]))).data
    assert out.tolist() == [[1.0, 0.0]]
    big = softmax_lastdim(Tensor(np.array([[1000.0, 1000.0, -1000.0]]))).data
    assert np.all(np.isfinite(big)) and abs(big.sum() - 1) < 1e-6
    rows = softmax_lastdim(Tensor(np.random.default_rng(1).normal(size=(50, 7)) * 20)).data
    assert np.abs(rows.sum(-1) - 1).max() < 1e-6


def test_layer_norm_values():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    with precision(np.float64):
        y = layer_norm(Tensor([[1.0, 2.0, 3.0]]), g, b).data
    assert abs(y.mean()) < 1e-6 and abs(y.var() - 1) < 1e-4  # epsilon sits inside the root
    assert np.allclose(layer_norm(Tensor(np.full((2, 3), 5.0)), g, b).data, 0.0)
    with pytest.raises(ValueError):
        layer_norm(Tensor(np.ones((2, 4))), g, b)


def test_gelu_values():
    with precision(np.float64):
        x = np.linspace(-4, 4, 17)
        assert np.allclose(gelu(Tensor(x)).data, x * 0.5 * (1 + erf(x / math.sqrt(2))), atol=1e-12)
        assert gelu(Tensor([0.0])).data[0] == 0.0
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6


def test_bilinear_texel_center_midpoint_and_clamp():
    with precision(np.float64):
        fmap = Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
        # x spans 4 columns, y spans 3 rows; align corners.
        x_of = lambda col: -1 + 2 * col / 3
        y_of = lambda row: -1 + 2 * row / 2
        pts = Tensor([[[x_of(2), y_of(1)], [0.5 * (x_of(0) + x_of(1)), y_of(2)], [5.0, -5.0]]])
        out = bilinear_sample(fmap, pts).data[0, :, 0]
        assert out[0] == pytest.approx(6.0)
        assert out[1] == pytest.approx(8.5)
        assert out[2] == pytest.approx(3.0)  # clamped to the top-right texel


def test_gather_rows_cases():
    x = Tensor(np.arange(12.0).reshape(4, 3))
    assert np.array_equal(gather_rows(x, np.arange(4)).data, x.data)
    assert np.array_equal(gather_rows(Tensor(np.arange(9.0).reshape(3, 3)), [2, 0]).data,
                          [[6, 7, 8], [0, 1, 2]])
    assert np.array_equal(gather_rows(x, [1, -1]).data[1], [0, 0, 0])
    with pytest.raises(IndexError):
        gather_rows(x, [4])
    with precision(np.float64):
        p = Tensor(np.ones((3, 2)), requires_grad=True)
        gather_rows(p, [1, 1, -1, 0]).sum().backward()
        assert p.grad.tolist() == [[1, 1], [2, 2], [0, 0]]


def test_conv_shapes_and_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 8, 8)))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    assert np.allclose(conv2d(x, Tensor(w), padding=1).data, x.data, atol=1e-6)
    assert conv2d(x, Tensor(np.ones((5, 3, 3, 3))), stride=2, padding=1).shape == (2, 5, 4, 4)
    assert upsample2x(x).shape == (2, 3, 16, 16)


def test_sparse_apply_matches_dense():
    S = sp.random(5, 4, density=0.6, random_state=3, format="csr")
    x = np.random.default_rng(0).normal(size=(2, 4, 3))
    assert np.allclose(sparse_apply(S, Tensor(x)).data, np.einsum("vw,bwc->bvc", S.toarray(), x), atol=1e-6)


def test_backward_hand_cases():
    with precision(np.float64):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.sum().backward()
        assert p.grad.tolist() == [1.0, 1.0]
        p.grad = None
        (p * p).sum().backward()
        assert p.grad.tolist() == [2.0, 4.0]
        (p * p).sum().backward()
        assert p.grad.tolist() == [4.0, 8.0]  # accumulates until zeroed
        with pytest.raises(ValueError):
            backward(p * 2)


def test_no_grad_and_default_dtype():
    p = Tensor([1.0], requires_grad=True)
    assert p.dtype == np.float32
    with no_grad():
        y = p * 2
    assert not y.requires_grad
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 16, 16)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    assert np.array_equal(conv2d(x, w, padding=1).data, conv2d(x, w, padding=1).data)


class _Quad(Module):
    def __init__(self):
        self.x = Parameter(np.array([0.0]))


def test_adam_quadratic_convergence():
    with precision(np.float64):
        m = _Quad()
        m.assign_names()
        opt = Adam(m.parameters(), lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            ((m.x - 3.0) * (m.x - 3.0)).sum().backward()
            opt.step()
        assert abs(m.x.data[0] - 3.0) < 1e-2
        assert opt.state.step == 500


def test_adam_zero_grad_and_missing_grad():
    p = Parameter(np.array([1.0, -2.0]), name="p")
    state = OptimizerState()
    p.grad = np.zeros(2, dtype=p.dtype)
    adam_step([p], state)
    assert p.data.tolist() == [1.0, -2.0] and state.step == 1
    q = Parameter(np.array([1.0]), name="q")
    with pytest.raises(ValueError):
        adam_step([q], state)
    with pytest.raises(ValueError):
        Adam([Parameter(np.ones(1), name="a"), Parameter(np.ones(1), name="a")])


def test_step_lr():
    assert step_lr(1e-3, 0, 5) == 1e-3
    assert step_lr(1e-3, 4, 5) == 1e-3
    assert step_lr(1e-3, 5, 5) == pytest.approx(1e-4)
    assert step_lr(1e-3, 50, None) == 1e-3


def test_parameter_names_unique_and_checkpoint(tmp_path):
    class Net(Module):
        def __init__(self):
            rng = np.random.default_rng(0)
            self.layers = [Linear(3, 4, rng), Linear(4, 2, rng)]

    net = Net()
    net.assign_names()
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names)) == 4
    for _, p in net.named_parameters():
        bound = math.sqrt(1.0 / p.shape[0]) if p.ndim == 2 else math.sqrt(1.0 / 4) + 1e-9
        assert np.abs(p.data).max() <= max(bound, math.sqrt(1 / 3))
    save_records(tmp_path / "ck", net.state_dict(), {"epoch": 3})
    records, meta = load_records(tmp_path / "ck")
    assert meta == {"epoch": 3}
    for k, v in net.state_dict().items():
        assert records[k].dtype == v.dtype and np.array_equal(records[k], v)
    other = Net()
    other.assign_names()
    other.load_state_dict(records)
    assert all(np.array_equal(a, b) for a, b in zip(other.state_dict().values(), net.state_dict().values()))
