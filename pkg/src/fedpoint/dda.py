"""Dynamic distribution adjustment for label-imbalanced sites.

Early in training most negative slides are dropped from the classification
loss; the keep probability rises along an exponential ramp until every
sample counts at the last epoch.  The auxiliary classifier always sees the
unmasked site distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor

__all__ = ["DdaSchedule", "mask_probability", "draw_masks", "loss_total", "LossParts", "LOG_FLOOR"]

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class DdaSchedule:
    gamma: float
    K: int
    enabled: bool = True

    def __post_init__(self):
        if not (self.gamma >= 1.0 and math.isfinite(self.gamma)):
            raise ValueError(f"gamma must be a finite value >= 1, got {self.gamma}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")


def mask_probability(k: int, sched: DdaSchedule) -> float:
    """Keep probability for negative samples at epoch ``k`` (0 <= k <= K)."""
    if not 0 <= k <= sched.K:
        raise ValueError(f"epoch {k} outside [0, {sched.K}]")
    if not sched.enabled:
        return 1.0
    if k == sched.K:
        return 1.0
    lo = 1.0 / sched.gamma
    ramp = math.expm1(k / sched.K) / (math.e - 1.0)
    return min(1.0, max(lo, lo + (1.0 - lo) * ramp))


def draw_masks(labels, b: float, rng: np.random.Generator) -> np.ndarray:
    """1 for every positive, Bernoulli(b) for every negative."""
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"b must be in [0, 1], got {b}")
    labels = np.asarray(labels)
    keep = rng.random(labels.shape[0]) < b
    return np.where(labels == 1, 1.0, keep.astype(np.float64))


@dataclass
class LossParts:
    cls: Tensor
    aux: Tensor
    total: Tensor
    clamped: int  # true-class probabilities that hit the log floor


def _picked(g: Graph, probs: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(probs.shape)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return g.sum(g.mul(probs, onehot), axis=1)


def loss_total(g: Graph, probs: Tensor, aux_probs: Tensor, labels, masks) -> LossParts:
    """Masked cross-entropy for the main head plus plain cross-entropy for the auxiliary head.

    Both terms divide by the full batch size, masked-out samples included.
    """
    labels = np.asarray(labels, dtype=np.intp)
    masks = np.asarray(masks, dtype=np.float64)
    B = labels.shape[0]
    if probs.shape != (B, 2) or aux_probs.shape != (B, 2) or masks.shape != (B,):
        raise ValueError("probs, aux_probs, labels and masks disagree on batch size")
    p = _picked(g, probs, labels)
    q = _picked(g, aux_probs, labels)
    clamped = int((p.values <= LOG_FLOOR).sum() + (q.values <= LOG_FLOOR).sum())
    cls = g.mul(g.sum(g.mul(g.log(p, floor=LOG_FLOOR), masks)), -1.0 / B)
    aux = g.mul(g.sum(g.log(q, floor=LOG_FLOOR)), -1.0 / B)
    return LossParts(cls, aux, g.add(cls, aux), clamped)
