"""Scalar accuracy and cost metrics."""
from __future__ import annotations

import numpy as np

TRMAE_THRESHOLD = 1e-3


def trmae(pred, target, tau: float = TRMAE_THRESHOLD) -> float | None:
    """Thresholded relative MAE over entries with ``|target| > tau``.

    Returns ``None`` when no entry passes the threshold.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    keep = np.abs(target) > tau
    if not keep.any():
        return None
    return float(np.mean(np.abs(pred[keep] - target[keep]) / np.abs(target[keep])))


def mse(pred, target) -> float | None:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        return None
    return float(np.mean((pred - target) ** 2))


def optimality_ratio(cost_solution: float, cost_reference: float) -> float:
    """Cost ratio in percent."""
    if not cost_reference > 0:
        raise ValueError(f"reference cost must be positive, got {cost_reference}")
    return 100.0 * float(cost_solution) / float(cost_reference)
