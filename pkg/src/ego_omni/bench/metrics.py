"""Pose error metrics: MPJPE, Procrustes-aligned MPJPE and jitter."""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise MetricError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}")
    return pred, gt


def mpjpe(pred, gt) -> float:
    """Mean per-joint Euclidean error in millimeters (inputs in meters)."""
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity transform (rotation, translation, uniform scale) of each
    (J, 3) frame of ``pred`` that best fits ``gt`` in least squares (Umeyama)."""
    pred, gt = _pair(pred, gt)
    single = pred.ndim == 2
    if single:
        pred, gt = pred[None], gt[None]
    mu_p = pred.mean(axis=1, keepdims=True)
    mu_g = gt.mean(axis=1, keepdims=True)
    x, y = pred - mu_p, gt - mu_g
    var_x = (x ** 2).sum(axis=(1, 2))
    if np.any(var_x < 1e-12) or np.any((y ** 2).sum(axis=(1, 2)) < 1e-12):
        raise MetricError("degenerate pose: all joints coincide")
    cov = np.einsum("fji,fjk->fik", y, x)  # gt^T pred
    U, S, Vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.tile(np.eye(3), (len(d), 1, 1))
    D[:, 2, 2] = d
    R = U @ D @ Vt
    scale = np.einsum("fi,fii->f", S, D) / var_x
    aligned = scale[:, None, None] * np.einsum("fik,fjk->fji", R, x) + mu_g
    return aligned[0] if single else aligned


def pa_mpjpe(pred, gt) -> float:
    """MPJPE after per-frame similarity Procrustes alignment of pred onto gt."""
    pred, gt = _pair(pred, gt)
    return mpjpe(procrustes_align(pred.reshape(-1, *pred.shape[-2:]), gt.reshape(-1, *gt.shape[-2:])),
                 gt.reshape(-1, *gt.shape[-2:]))


def jitter(pred, fps: float) -> float:
    """Mean jerk magnitude in km/s^3 from third finite differences."""
    p = np.asarray(pred, dtype=np.float64)
    if p.shape[0] < 4:
        raise MetricError("jitter needs at least 4 frames")
    jerk = (p[3:] - 3 * p[2:-1] + 3 * p[1:-2] - p[:-3]) * fps ** 3
    return float(np.linalg.norm(jerk, axis=-1).mean() / 1000.0)
