"""Forward corruption, the conditional reverse chain and the noise schedule.

Timesteps are 1-based throughout (t = 1 ... T), matching the usual DDPM
notation; schedule arrays are stored 0-based, so ``beta[t - 1]`` is beta_t.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

TimeArg = Union[int, torch.Tensor]

# model(s_t, t, context) -> predicted noise with the shape of s_t
NoisePredictor = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


class ScheduleError(ValueError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, t: int, what: str = "sample"):
        super().__init__(f"non-finite values in {what} at timestep t={t}")
        self.t = t


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t: TimeArg) -> None:
        if isinstance(t, torch.Tensor):
            lo, hi = int(t.min()), int(t.max())
        else:
            lo = hi = int(t)
        if lo < 1 or hi > self.T:
            raise ScheduleError(f"timestep out of range [1, {self.T}]: {lo}..{hi}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("beta", "alpha", "alpha_bar", "sigma2")}


def schedule_from_betas(beta: Sequence[float]) -> DiffusionSchedule:
    """Build a schedule from explicit per-step variances.

    Reverse variances follow the sigma_t^2 = beta_t convention.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise ScheduleError("beta must be a non-empty 1-D sequence")
    if not np.all((beta > 0) & (beta < 1)):
        raise ScheduleError("every beta_t must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    sigma2 = beta.copy()
    sigma2.setflags(write=False)
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=sigma2)


def build_linear_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> DiffusionSchedule:
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return schedule_from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _coef(values: np.ndarray, t: TimeArg, like: torch.Tensor) -> torch.Tensor:
    """Gather ``values[t - 1]`` broadcastable against ``like``."""
    if isinstance(t, torch.Tensor):
        c = torch.tensor(values, dtype=like.dtype, device=like.device)[t.long() - 1]
        return c.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(values[int(t) - 1], dtype=like.dtype, device=like.device)


def q_step(
    s_prev: torch.Tensor,
    t: int,
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Draw s_t ~ N(sqrt(1 - beta_t) s_{t-1}, beta_t I)."""
    schedule.check_t(t)
    beta = schedule.beta[int(t) - 1]
    noise = torch.randn(s_prev.shape, generator=generator, dtype=s_prev.dtype)
    return float(np.sqrt(1.0 - beta)) * s_prev + float(np.sqrt(beta)) * noise


def q_sample(
    s0: torch.Tensor, t: TimeArg, eps: torch.Tensor, schedule: DiffusionSchedule
) -> torch.Tensor:
    """Closed-form forward marginal ``sqrt(abar_t) s0 + sqrt(1 - abar_t) eps``.

    ``t`` is either a single timestep or one timestep per leading batch entry.
    """
    if eps.shape != s0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != s0 shape {tuple(s0.shape)}")
    schedule.check_t(t)
    abar = _coef(schedule.alpha_bar, t, s0)
    return torch.sqrt(abar) * s0 + torch.sqrt(1.0 - abar) * eps


def compute_mu(
    s_t: torch.Tensor, eps_hat: torch.Tensor, t: TimeArg, schedule: DiffusionSchedule
) -> torch.Tensor:
    """Reverse-step mean from a noise prediction.

    mu = (s_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
    """
    if eps_hat.shape != s_t.shape:
        raise ValueError("eps_hat and s_t must have the same shape")
    schedule.check_t(t)
    alpha = _coef(schedule.alpha, t, s_t)
    abar = _coef(schedule.alpha_bar, t, s_t)
    return (s_t - (1.0 - alpha) / torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(alpha)


def predict_x0(
    s_t: torch.Tensor, eps_hat: torch.Tensor, t: TimeArg, schedule: DiffusionSchedule
) -> torch.Tensor:
    """Invert the forward marginal for s0 given a noise estimate."""
    abar = _coef(schedule.alpha_bar, t, s_t)
    return (s_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)


def _batched_t(t: int, s: torch.Tensor) -> torch.Tensor:
    return torch.full((s.shape[0],), int(t), dtype=torch.long, device=s.device)


def p_sample_step(
    model: NoisePredictor,
    s_t: torch.Tensor,
    context,
    t: int,
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """One ancestral step s_t -> s_{t-1}; the last step (t = 1) adds no noise.

    ``context`` is whatever the model needs to form its step-adaptive
    condition; it is handed through unchanged.
    """
    schedule.check_t(t)
    eps_hat = model(s_t, _batched_t(t, s_t), context)
    mu = compute_mu(s_t, eps_hat, t, schedule)
    if t == 1:
        return mu
    sigma = float(np.sqrt(schedule.sigma2[int(t) - 1]))
    z = torch.randn(s_t.shape, generator=generator, dtype=s_t.dtype, device=s_t.device)
    return mu + sigma * z


@torch.no_grad()
def sample(
    model: NoisePredictor,
    context,
    shape: Sequence[int],
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
    progress: Optional[Callable[[int], None]] = None,
) -> torch.Tensor:
    """Run the full reverse chain from s_T ~ N(0, I) down to s_0.

    Args:
        shape: ``[B, C, H, W]`` (or ``[C, H, W]``, treated as a batch of one).

    Returns:
        The final sample clamped to [-1, 1], with the requested shape.
    """
    squeeze = len(shape) == 3
    full = (1, *shape) if squeeze else tuple(shape)
    s = torch.randn(full, generator=generator, dtype=dtype)
    for t in range(schedule.T, 0, -1):
        s = p_sample_step(model, s, context, t, schedule, generator)
        if not torch.isfinite(s).all():
            raise NumericalError(t)
        if progress is not None:
            progress(t)
    s = s.clamp(-1.0, 1.0)
    return s[0] if squeeze else s
