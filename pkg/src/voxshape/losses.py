"""Probabilistic Dice, the alignment + reconstruction objective, and its weight schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from voxshape import config
from voxshape.autodiff import Node, as_node, ops
from voxshape.errors import ShapeError


def soft_dice(a, b, batched: bool = False, eps: float = config.DICE_EPS) -> Node:
    """Sum of the voxelwise product over the mean of the two volume sums.

    With ``batched=True`` the leading axis indexes samples and a vector of
    per-sample Dice values is returned.
    """
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise ShapeError("soft_dice", f"shape mismatch {a.shape} vs {b.shape}")
    axis = tuple(range(1, a.value.ndim)) if batched else None
    inter = ops.reduce_sum(ops.mul(a, b), axis=axis)
    total = ops.add(ops.reduce_sum(a, axis=axis), ops.reduce_sum(b, axis=axis))
    return ops.div(ops.add_scalar(inter, eps), ops.add_scalar(ops.mul_scalar(total, 0.5), eps))


def dice_value(a: np.ndarray, b: np.ndarray, eps: float = config.DICE_EPS) -> float:
    """Plain-numpy Dice for evaluation code paths."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float((np.sum(a * b) + eps) / (0.5 * (a.sum() + b.sum()) + eps))


@dataclass(frozen=True)
class ZetaSchedule:
    zeta_start: float = 1e-10
    zeta_end: float = 1e-3
    epochs_total: int = 40

    def __post_init__(self):
        if not (0 < self.zeta_start <= self.zeta_end):
            raise ValueError("need 0 < zeta_start <= zeta_end")
        if self.epochs_total < 1:
            raise ValueError("epochs_total must be >= 1")


def zeta(epoch: int, s: ZetaSchedule = ZetaSchedule()) -> float:
    """Reconstruction weight for a 1-based epoch: linear ramp, held at the end value."""
    if epoch >= s.epochs_total:
        return s.zeta_end
    frac = max(epoch - 1, 0) / (s.epochs_total - 1)
    return s.zeta_start + frac * (s.zeta_end - s.zeta_start)


@dataclass
class LossBreakdown:
    alignment: Node
    reconstruction: Node
    zeta: float
    total: Node

    def values(self) -> dict:
        return {
            "alignment": float(self.alignment.value),
            "reconstruction": float(self.reconstruction.value),
            "zeta": self.zeta,
            "total": float(self.total.value),
        }


def total_loss(x, x_ref, x_hat, z: float, batched: bool = False) -> LossBreakdown:
    """-Dice(x, x_ref) - z * Dice(x, x_hat).

    Batched inputs give the unweighted batch mean of the per-sample losses.
    """
    if z < 0:
        raise ValueError("reconstruction weight must be non-negative")
    align = ops.mul_scalar(soft_dice(x, x_ref, batched=batched), -1.0)
    recon = ops.mul_scalar(soft_dice(x, x_hat, batched=batched), -1.0)
    if batched:
        align, recon = ops.mean(align), ops.mean(recon)
    total = ops.add(align, ops.mul_scalar(recon, z))
    return LossBreakdown(alignment=align, reconstruction=recon, zeta=z, total=total)
