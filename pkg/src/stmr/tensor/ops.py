"""Differentiable kernels.

Every kernel returns a new Tensor whose backward closure maps the output
gradient to one gradient per parent (``None`` where a parent is constant).
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from .core import Tensor, as_tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _operand(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


# --- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(a.data + b.data, (a, b),
                           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(a.data - b.data, (a, b),
                           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor._from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None), "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    return Tensor._from_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a: Tensor) -> Tensor:
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return Tensor._from_op(out, (a,), bw, "gelu")


# --- reductions and shape ----------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return Tensor._from_op(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                           lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(a.data[index], (a,), bw, "getitem")


# --- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear expects last dim {weight.shape[0]}, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(out.reshape(*lead, weight.shape[1]), parents, bw, "linear")


def sparse_apply(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Apply a constant sparse (rows x V) matrix along axis -2 of ``x`` [B, V, C]."""
    m = sp.csr_matrix(matrix)
    mt = m.T.tocsr()
    B, V, C = x.shape
    if m.shape[1] != V:
        raise ValueError(f"sparse matrix has {m.shape[1]} columns, input has {V} rows")

    def apply(mat, arr):
        n = arr.shape[1]
        flat = np.ascontiguousarray(arr.transpose(1, 0, 2)).reshape(n, -1)
        res = np.asarray(mat @ flat).reshape(mat.shape[0], B, C).transpose(1, 0, 2)
        return np.ascontiguousarray(res, dtype=arr.dtype)

    return Tensor._from_op(apply(m, x.data), (x,), lambda g: (apply(mt, g),), "sparse_apply")


# --- attention pieces --------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis; ``-inf`` logits map to exactly 0."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise ValueError(f"layer_norm affine params must have shape ({C},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        gx = inv / C * (C * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(out, (x, gain, bias), bw, "layer_norm")


def gather_rows(x: Tensor, indices, pad: int = -1) -> Tensor:
    """Select rows along axis -2 of ``x`` [..., V, C] by an integer index array.

    Output shape is ``[..., *indices.shape, C]``. Entries equal to ``pad`` give
    zero rows. The backward pass scatters additively, so repeated indices sum
    their gradients.
    """
    idx = np.asarray(indices)
    V = x.shape[-2]
    valid = idx != pad
    if np.any(idx[valid] < 0) or np.any(idx[valid] >= V):
        raise IndexError(f"gather index out of range for {V} rows")
    safe = np.where(valid, idx, 0)
    out = np.take(x.data, safe, axis=-2)
    keep = valid[..., None].astype(x.dtype)
    out = out * keep

    def bw(g):
        g = g * keep
        lead = x.shape[:-2]
        C = x.shape[-1]
        n = safe.size
        # Scatter-add as a sparse transpose product (much faster than np.add.at).
        scatter = sp.csr_matrix((np.ones(n, dtype=x.dtype), (safe.ravel(), np.arange(n))), shape=(V, n))
        gflat = np.moveaxis(g.reshape((-1, n, C)), 1, 0).reshape(n, -1)
        gx = np.asarray(scatter @ gflat).reshape(V, -1, C)
        return (np.moveaxis(gx, 0, 1).reshape(lead + (V, C)),)

    return Tensor._from_op(out, (x,), bw, "gather_rows")


# --- image kernels -----------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; ``x`` [B, Cin, H, W], ``weight`` [Cout, Cin, k, k]."""
    B, Cin, H, W = x.shape
    Cout, Cin2, k, k2 = weight.shape
    if Cin != Cin2 or k != k2:
        raise ValueError(f"conv2d weight {weight.shape} does not fit input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # B, Ho, Wo, Cin, k, k
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(np.ascontiguousarray(out), parents, bw, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of [B, C, H, W]."""
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),), "upsample2x")


def bilinear_sample(fmap: Tensor, points: Tensor) -> Tensor:
    """Sample ``fmap`` [B, C, H, W] at ``points`` [B, N, 2] given as (x, y) in [-1, 1].

    Align-corners convention: -1 is the center of the first texel and +1 the
    center of the last. Points outside are clamped to the border (with zero
    gradient in the clamped direction). Returns [B, N, C].
    """
    B, C, H, W = fmap.shape
    f = fmap.data
    p = points.data
    px = (p[..., 0] + 1.0) * 0.5 * (W - 1)
    py = (p[..., 1] + 1.0) * 0.5 * (H - 1)
    in_x = (px >= 0) & (px <= W - 1)
    in_y = (py >= 0) & (py <= H - 1)
    px = np.clip(px, 0, W - 1)
    py = np.clip(py, 0, H - 1)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(py).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (px - x0).astype(f.dtype)[..., None]
    wy = (py - y0).astype(f.dtype)[..., None]
    b = np.arange(B)[:, None]
    f00 = f[b, :, y0, x0]
    f01 = f[b, :, y0, x1]
    f10 = f[b, :, y1, x0]
    f11 = f[b, :, y1, x1]
    out = (1 - wx) * (1 - wy) * f00 + wx * (1 - wy) * f01 + (1 - wx) * wy * f10 + wx * wy * f11

    def bw(g):
        gf = None
        if fmap.requires_grad:
            gf = np.zeros_like(f)
            for yy, xx, w in ((y0, x0, (1 - wx) * (1 - wy)), (y0, x1, wx * (1 - wy)),
                              (y1, x0, (1 - wx) * wy), (y1, x1, wx * wy)):
                np.add.at(gf, (b, slice(None), yy, xx), g * w)
        gp = None
        if points.requires_grad:
            dx = ((1 - wy) * (f01 - f00) + wy * (f11 - f10)) * g
            dy = ((1 - wx) * (f10 - f00) + wx * (f11 - f01)) * g
            gp = np.stack([dx.sum(-1) * (0.5 * (W - 1)) * in_x, dy.sum(-1) * (0.5 * (H - 1)) * in_y], axis=-1)
            gp = gp.astype(p.dtype, copy=False)
        return gf, gp

    return Tensor._from_op(out, (fmap, points), bw, "bilinear_sample")


# --- operator binding --------------------------------------------------------


def _bind():
    T = Tensor
    T.__add__ = lambda a, b: add(a, _operand(b, a))
    T.__radd__ = lambda a, b: add(_operand(b, a), a)
    T.__sub__ = lambda a, b: sub(a, _operand(b, a))
    T.__rsub__ = lambda a, b: sub(_operand(b, a), a)
    T.__mul__ = lambda a, b: mul(a, _operand(b, a))
    T.__rmul__ = lambda a, b: mul(_operand(b, a), a)
    T.__truediv__ = lambda a, b: div(a, _operand(b, a))
    T.__rtruediv__ = lambda a, b: div(_operand(b, a), a)
    T.__neg__ = neg
    T.__pow__ = power
    T.__matmul__ = lambda a, b: matmul(a, _operand(b, a))
    T.__getitem__ = getitem
    T.sum = tsum
    T.mean = mean
    T.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    T.transpose = transpose
    T.abs = absolute


_bind()
