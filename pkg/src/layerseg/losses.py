"""Training objectives.

Both players minimize: the discriminator minimizes
``-[log D(x) + log(1 - D(x_g))]`` and the generator minimizes the
non-saturating ``-log D(x_g)`` plus the weighted area and information terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

from . import tensor as T
from .tensor import Tensor

LOG_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1000.0
    area_target: float = 0.25
    beta: float = 0.0
    eps: float = LOG_EPS

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 < self.area_target < 1.0:
            raise ValueError(f"area target must lie in (0, 1), got {self.area_target}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 < self.eps <= 1e-3:
            raise ValueError(f"log clamp must lie in (0, 1e-3], got {self.eps}")


@dataclass
class LossReport:
    step: int
    loss_d: float
    loss_g_adv: float
    area_penalty: float
    info_term: float
    total_g: float

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f.name)) for f in fields(self) if f.name != "step")

    def csv_row(self) -> str:
        vals = [repr(float(getattr(self, f.name))) for f in fields(self) if f.name != "step"]
        return ",".join([str(self.step)] + vals)


CSV_HEADER = "step,loss_d,loss_g_adv,area_penalty,info_term,total_g"


def _clamped(d, eps: float) -> Tensor:
    return T.clamp(T.as_tensor(d), eps, 1.0 - eps)


def discriminator_loss(d_real, d_fake, eps: float = LOG_EPS) -> Tensor:
    """Batch mean of -[log D(x) + log(1 - D(x_g))]."""
    real = T.log(_clamped(d_real, eps))
    fake = T.log(1.0 - _clamped(d_fake, eps))
    return -(T.mean(real) + T.mean(fake))


def generator_adv_loss(d_fake, eps: float = LOG_EPS) -> Tensor:
    return -T.mean(T.log(_clamped(d_fake, eps)))


def mask_area_penalty(masks: Sequence[Tensor], area_target: float) -> Tensor:
    """Mean over slots of (||m_i||_1 / A - a)^2, then averaged over the batch."""
    if not masks:
        raise ValueError("mask_area_penalty needs at least one mask")
    total = None
    for m in masks:
        m = T.as_tensor(m)
        pixels = m.shape[-1] * m.shape[-2] * m.shape[-3]
        per_image = T.l1_norm(m, axis=(-3, -2, -1)) / float(pixels)
        term = T.square(per_image - area_target)
        total = term if total is None else total + term
    return T.mean(total / float(len(masks)))


def info_regularizer(q_pred, z) -> Tensor:
    q_pred, z = T.as_tensor(q_pred), T.as_tensor(z)
    if q_pred.shape != z.shape:
        raise ValueError(f"prediction shape {q_pred.shape} does not match latent shape {z.shape}")
    return T.mean(T.square(q_pred - z))


def smooth_l1(x) -> Tensor:
    return T.smooth_l1(T.as_tensor(x))


def total_generator_loss(adv, area, info, weights: LossWeights) -> Tensor:
    total = T.as_tensor(adv) + T.as_tensor(area) * weights.lam
    if weights.beta:
        total = total + T.as_tensor(info) * weights.beta
    return total
