"""DDPM noise schedule and forward-process arithmetic.

Timesteps are 1-indexed (t = 1..T) to mirror the sampling loop
"t = T, T-1, ..., 1"; table index t-1 holds step t. All tables are kept
in double precision and cast down at the network boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray  # posterior std sqrt(beta_t (1-abar_{t-1}) / (1-abar_t))

    def check_t(self, t: int) -> None:
        if not (1 <= t <= self.T):
            raise ValidationError(f"t={t} outside schedule range [1, {self.T}]")


def linear_schedule(T: int, beta_1: float, beta_T: float) -> NoiseSchedule:
    """Linear beta schedule with derived alpha / alpha-bar / posterior-std
    tables (alpha_bar_0 = 1 convention, so sigma_1 = 0)."""
    if T < 1:
        raise ValidationError("T must be >= 1")
    if not (0 < beta_1 <= beta_T < 1):
        raise ValidationError("require 0 < beta_1 <= beta_T < 1")
    if T == 1:
        beta = np.array([beta_1], dtype=np.float64)
    else:
        beta = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt(beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar))
    return NoiseSchedule(T=T, beta=beta, alpha=alpha,
                         alpha_bar=alpha_bar, sigma=sigma)


def q_sample(z0: torch.Tensor, t: int, eps: torch.Tensor,
             sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward sample sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    sched.check_t(t)
    if eps.shape != z0.shape:
        raise ValidationError("eps shape must match z0 shape")
    abar = sched.alpha_bar[t - 1]
    a = float(np.sqrt(abar))
    b = float(np.sqrt(1.0 - abar))
    return a * z0 + b * eps


def q_sample_batch(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    """Per-item forward sample for a batch; ``t`` is a (B,) int tensor."""
    if torch.any((t < 1) | (t > sched.T)):
        raise ValidationError("batch t values outside schedule range")
    abar = torch.from_numpy(sched.alpha_bar).to(z0.dtype)[t - 1]
    shape = (-1,) + (1,) * (z0.dim() - 1)
    a = torch.sqrt(abar).reshape(shape)
    b = torch.sqrt(1.0 - abar).reshape(shape)
    return a * z0 + b * eps
