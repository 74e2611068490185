"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .core import Tensor, backward


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """Normwise relative error ``|a - b| / max(|a|, |b|, floor)`` (0 when all vanish)."""
    a = np.ravel(a).astype(np.float64)
    b = np.ravel(b).astype(np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numerical_gradient(fn, tensors, h: float = 1e-5, entries=None) -> list[np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. each tensor's data.

    ``entries`` optionally restricts each tensor to a list of flat indices;
    other entries come back as NaN.
    """
    grads = []
    for k, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        g = np.full(flat.shape, np.nan)
        idx = range(flat.size) if entries is None else entries[k]
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = float(fn().data)
            flat[i] = old - h
            fm = float(fn().data)
            flat[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g.reshape(t.shape))
    return grads


def check_gradients(fn, tensors, h: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> float:
    """Largest normwise relative error between backward and finite differences.

    With ``max_entries`` each tensor is checked on a random subset of that
    many coordinates. A tensor whose true gradient is zero (for instance a
    bias that softmax cancels) is measured against ``1e-6`` times the largest
    gradient norm instead of its own roundoff-sized norm.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    entries = None
    if max_entries is not None:
        rng = np.random.default_rng(seed)
        entries = [rng.choice(t.size, size=min(t.size, max_entries), replace=False) for t in tensors]
    numeric = numerical_gradient(fn, tensors, h, entries)
    sels = [slice(None) if entries is None else entries[k] for k in range(len(tensors))]
    floor = 1e-6 * max(np.linalg.norm(a.reshape(-1)[sel]) for a, sel in zip(analytic, sels))
    worst = 0.0
    for k, sel in enumerate(sels):
        worst = max(worst, relative_error(analytic[k].reshape(-1)[sel], numeric[k].reshape(-1)[sel], floor))
    return worst


def check_gradients_joint(fn, tensors, h: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> float:
    """Like :func:`check_gradients` but one relative error over all tensors together."""
    for t in tensors:
        t.grad = None
    backward(fn())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    entries = [rng.choice(t.size, size=min(t.size, max_entries), replace=False) if max_entries else
               np.arange(t.size) for t in tensors]
    numeric = numerical_gradient(fn, tensors, h, entries)
    a = np.concatenate([analytic[k].reshape(-1)[entries[k]] for k in range(len(tensors))])
    n = np.concatenate([numeric[k].reshape(-1)[entries[k]] for k in range(len(tensors))])
    return relative_error(a, n)
