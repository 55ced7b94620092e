"""Joint two-target loss on standardised values."""

from __future__ import annotations

from enum import Enum

import numpy as np

from ..errors import NonFinite


class LossVariant(str, Enum):
    MIXED = "mixed"  # smooth-L1 on offset, squared error on duration
    UNIFORM = "uniform"  # smooth-L1 on both


def smooth_l1(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise value and derivative; quadratic for |e| < 1, linear beyond."""
    a = np.abs(e)
    quad = a < 1.0
    val = np.where(quad, 0.5 * e * e, a - 0.5)
    grad = np.where(quad, e, np.sign(e))
    return val, grad


def loss_joint(pred: np.ndarray, target: np.ndarray, variant: LossVariant | str = LossVariant.MIXED):
    """Mean over the batch of the per-sample summed loss; returns (loss, dloss/dpred).

    Accepts a single 2-vector or a (B, 2) batch.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise NonFinite("loss inputs contain NaN or inf")
    single = pred.ndim == 1
    p2 = pred.reshape(-1, 2)
    e = p2 - target.reshape(-1, 2)
    n = p2.shape[0]
    v0, g0 = smooth_l1(e[:, 0])
    if LossVariant(variant) is LossVariant.MIXED:
        v1, g1 = e[:, 1] * e[:, 1], 2.0 * e[:, 1]
    else:
        v1, g1 = smooth_l1(e[:, 1])
    loss = float((v0 + v1).sum() / n)
    grad = np.column_stack([g0, g1]) / n
    return loss, grad.reshape(pred.shape) if single else grad
