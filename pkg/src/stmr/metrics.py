"""Evaluation metrics on numpy arrays; distances in millimeters."""

from __future__ import annotations

import numpy as np

METRIC_KEYS = ("mpjpe", "mpvpe", "pa_mpjpe", "pa_mpvpe", "auc_3d", "f5", "f15")


class DegenerateAlignment(ValueError):
    pass


def procrustes_align(X, Y) -> np.ndarray:
    """Similarity transform of ``X`` (N x 3) that best matches ``Y`` in least squares.

    Closed form from the SVD of the cross-covariance, with the sign of the
    last singular direction flipped when needed to exclude reflections.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3 or len(X) < 3:
        raise ValueError(f"procrustes_align needs matching (N>=3, 3) arrays, got {X.shape} {Y.shape}")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var_x = (Xc ** 2).sum()
    if var_x < 1e-18 or np.linalg.matrix_rank(Xc, tol=1e-9 * max(1.0, np.sqrt(var_x))) < 2:
        raise DegenerateAlignment("point configuration is rank-deficient")
    cov = Yc.T @ Xc
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = np.trace(np.diag(S) @ D) / var_x
    return s * Xc @ R.T + my


def _batched(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        return pred[None], gt[None]
    return pred.reshape(-1, *pred.shape[-2:]), gt.reshape(-1, *gt.shape[-2:])


def point_errors(pred, gt, aligned: bool = False) -> np.ndarray:
    """Per-point Euclidean errors, shape [samples, N]."""
    p, g = _batched(pred, gt)
    if aligned:
        p = np.stack([procrustes_align(a, b) for a, b in zip(p, g)])
    return np.linalg.norm(p - g, axis=-1)


def mpjpe_mpvpe(pred, gt, aligned: bool = False) -> float:
    return float(point_errors(pred, gt, aligned).mean())


def default_thresholds(n: int = 101) -> np.ndarray:
    return np.linspace(0.0, 50.0, n)


def pck_auc(errors, thresholds=None) -> float:
    """Normalized area under PCK(t) over ``thresholds`` (trapezoidal rule).

    ``errors`` holds per-point distances pooled over joints and samples.
    """
    t = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if t.size < 2:
        raise ValueError("threshold grid needs at least two values")
    if np.any(np.diff(t) <= 0):
        raise ValueError("thresholds must be ascending")
    e = np.ravel(errors)
    # Errors within floating-point noise of a threshold count as inside it.
    pck = (e[None, :] <= t[:, None] + 1e-9).mean(axis=1)
    area = np.sum(0.5 * (pck[1:] + pck[:-1]) * np.diff(t))
    return float(area / (t[-1] - t[0]))


def f_score(pred_vertices, gt_vertices, d: float) -> float:
    """Harmonic mean of vertex precision and recall at distance ``d`` (exhaustive NN)."""
    p = np.asarray(pred_vertices, dtype=np.float64)
    g = np.asarray(gt_vertices, dtype=np.float64)
    dist = np.linalg.norm(p[:, None, :] - g[None, :, :], axis=-1)
    precision = float((dist.min(axis=1) <= d).mean())
    recall = float((dist.min(axis=0) <= d).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def metrics_report(pred_vertices, gt_vertices, pred_joints, gt_joints, thresholds=None) -> dict:
    """The seven evaluation metrics over a batch of meshes and joints.

    AUC and F-scores are computed after Procrustes alignment of each sample.
    """
    pv, gv = _batched(pred_vertices, gt_vertices)
    pj, gj = _batched(pred_joints, gt_joints)
    pa_joint_err = point_errors(pj, gj, aligned=True)
    aligned_v = np.stack([procrustes_align(a, b) for a, b in zip(pv, gv)])
    return {
        "mpjpe": mpjpe_mpvpe(pj, gj),
        "mpvpe": mpjpe_mpvpe(pv, gv),
        "pa_mpjpe": float(pa_joint_err.mean()),
        "pa_mpvpe": float(np.linalg.norm(aligned_v - gv, axis=-1).mean()),
        "auc_3d": pck_auc(pa_joint_err, thresholds),
        "f5": float(np.mean([f_score(a, b, 5.0) for a, b in zip(aligned_v, gv)])),
        "f15": float(np.mean([f_score(a, b, 15.0) for a, b in zip(aligned_v, gv)])),
    }
