"""Laplace negative log-likelihood, winner-takes-all selection and the total loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    reg_pro: Tensor
    cls_pro: Tensor
    reg_ref: Tensor
    cls_ref: Tensor
    total: Tensor
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("reg_pro", "cls_pro", "reg_ref", "cls_ref", "total")}


def laplace_nll(mean, scale, gt) -> Tensor:
    """Mean over waypoints of ``sum_axes log(2b) + |y - mu| / b``.

    Leading axes (agents) are averaged too, so ``(F, 2)`` and ``(N, F, 2)``
    inputs both give the per-waypoint average.
    """
    mean, scale, gt = ad.as_tensor(mean), ad.as_tensor(scale), ad.as_tensor(gt)
    if (scale.data <= 0).any():
        raise ValueError("Laplace scale must be positive")
    per_axis = ad.log(2.0 * scale) + ad.abs_(gt - mean) / scale
    per_waypoint = per_axis.sum(axis=-1)
    return per_waypoint.mean()


def wta_mode(predictions, gt) -> int:
    """Index of the mode with the smallest summed per-step displacement (lowest index on ties)."""
    pred = np.asarray(predictions, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    err = np.hypot(pred[..., 0] - gt[..., 0], pred[..., 1] - gt[..., 1]).sum(axis=-1)
    return int(np.argmin(err))


def wta_modes(predictions: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Batched :func:`wta_mode`: ``(R, M, F, 2)`` against ``(R, F, 2)``."""
    diff = predictions - gt[:, None]
    return np.argmin(np.hypot(diff[..., 0], diff[..., 1]).sum(axis=-1), axis=-1)


def classification_loss(confidences, target: int) -> Tensor:
    """``-log(confidence[target])`` with the argument floored at 1e-12."""
    c = ad.as_tensor(confidences)
    picked = c[target]
    floor = picked.data < LOG_FLOOR
    return -ad.log(ad.where(floor, Tensor(LOG_FLOOR), picked))


def cross_entropy_from_logits(logits: Tensor, target: int) -> Tensor:
    return -ad.log_softmax(logits, axis=-1)[target]


def combine(components: tuple[Tensor, Tensor, Tensor, Tensor],
            weights=(1.0, 1.0, 1.0, 1.0)) -> LossBreakdown:
    reg_pro, cls_pro, reg_ref, cls_ref = components
    a, b, g, dl = weights
    total = a * reg_pro + b * cls_pro + g * reg_ref + dl * cls_ref
    return LossBreakdown(reg_pro, cls_pro, reg_ref, cls_ref, total, tuple(weights))


def row_losses(means: Tensor, scales: Tensor, logits: Tensor, gt: np.ndarray,
               rows: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-row WTA Laplace NLL and cross-entropy for the selected ``rows``.

    ``means``/``scales`` ``(R, M, F, 2)``, ``logits`` ``(R, M)``, ``gt`` ``(R, F, 2)``.
    Returns two ``(len(rows),)`` tensors.
    """
    gt_rows = gt[rows]
    best = wta_modes(means.data[rows], gt_rows)
    mu = means[rows, best]                      # (K, F, 2)
    b = scales[rows, best]
    nll = (ad.log(2.0 * b) + ad.abs_(Tensor(gt_rows) - mu) / b).sum(axis=-1).mean(axis=-1)
    ce = -ad.log_softmax(logits[rows], axis=-1)[np.arange(len(rows)), best]
    return nll, ce


def scenario_weights(valid: np.ndarray) -> np.ndarray:
    """Row weights that average over agents within a scenario, then over scenarios."""
    counts = valid.sum(axis=1, keepdims=True)
    per_scenario = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    n_scen = max(int((counts[:, 0] > 0).sum()), 1)
    return (valid * per_scenario / n_scen).reshape(-1)
