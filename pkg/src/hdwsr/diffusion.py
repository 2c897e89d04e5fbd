"""Residual-space DDPM: schedule, forward corruption, ancestral step, losses.

Timesteps are 1-indexed (``1..T``); ``alpha_bar_0`` is taken as 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DimensionError

Step = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return self.betas.numel()

    def _at(self, table: torch.Tensor, t: Step, like: torch.Tensor) -> torch.Tensor:
        """Gather ``table[t - 1]`` shaped to broadcast against ``like``."""
        if isinstance(t, torch.Tensor) and t.dim() > 0:
            if t.min() < 1 or t.max() > self.T:
                raise IndexError(f"timesteps must lie in 1..{self.T}")
            vals = table[t.long() - 1].to(like.dtype)
            return vals.reshape(-1, *([1] * (like.dim() - 1)))
        t = int(t)
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")
        return table[t - 1].to(like.dtype)

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bars[t - 2])

    def posterior_variance(self, t: int) -> float:
        ab = float(self.alpha_bars[t - 1])
        return float(self.betas[t - 1]) * (1.0 - self.alpha_bar_prev(t)) / (1.0 - ab)


def make_schedule(T: int, beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule with cumulative products, stored in float64."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, torch.cumprod(alphas, 0))


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def q_sample(x0: torch.Tensor, t: Step, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``; ``t`` may be per-batch."""
    _same_shape(x0, eps, "q_sample")
    ab = s._at(s.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def implied_noise(x_t: torch.Tensor, x0: torch.Tensor, t: Step, s: NoiseSchedule) -> torch.Tensor:
    """The noise that maps ``x0`` to ``x_t`` under :func:`q_sample`."""
    ab = s._at(s.alpha_bars, t, x0)
    return (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()


def reverse_step(
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    s: NoiseSchedule,
    z: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral step using the posterior variance.

    ``z`` must be zero (or omitted) at ``t == 1``.
    """
    _same_shape(x_t, eps_pred, "reverse_step")
    t = int(t)
    if not 1 <= t <= s.T:
        raise IndexError(f"timestep {t} outside 1..{s.T}")
    if z is not None:
        _same_shape(x_t, z, "reverse_step noise")
        if t == 1 and bool((z != 0).any()):
            raise ContractError("z must be zero at t = 1")
    beta = float(s.betas[t - 1])
    alpha = float(s.alphas[t - 1])
    ab = float(s.alpha_bars[t - 1])
    mean = (x_t - (beta / (1.0 - ab) ** 0.5) * eps_pred) / alpha**0.5
    if z is None or t == 1:
        return mean
    return mean + s.posterior_variance(t) ** 0.5 * z


def form_pair(hr: torch.Tensor, presr: torch.Tensor) -> torch.Tensor:
    """Residual ``hr - presr``, computed and returned in float64.

    float64 makes the subtraction exact for float32 or quantised images, so
    :func:`compose_sr` restores ``hr`` bit for bit.
    """
    _same_shape(hr, presr, "form_pair")
    return hr.double() - presr.double()


def compose_sr(presr: torch.Tensor, residual: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """``presr + residual`` in ``presr``'s dtype; clamped to [0, 1] by default."""
    _same_shape(presr, residual, "compose_sr")
    out = presr.double() + residual.double()
    if clamp:
        out = out.clamp(0.0, 1.0)
    return out.to(presr.dtype)


def loss_ha(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared noise-prediction error."""
    _same_shape(eps_true, eps_pred, "loss_ha")
    return F.mse_loss(eps_pred, eps_true)


@dataclass
class LossTerms:
    l_he: torch.Tensor | float
    l_ha: torch.Tensor | float
    beta_weight: float
    total: torch.Tensor | float


def loss_total(l_he, l_ha, beta_weight: float = 0.2) -> LossTerms:
    if not 0.0 < beta_weight < 1.0:
        raise ConfigError(f"beta_weight must lie in (0, 1), got {beta_weight}")
    total = beta_weight * l_he + (1.0 - beta_weight) * l_ha
    return LossTerms(l_he, l_ha, beta_weight, total)
