"""DDPM noising schedule, forward process, ancestral reverse step and sampler.

Timesteps are 1-indexed, ``t in [1, T]``; schedule arrays are 0-indexed so
``alpha_bars[t - 1]`` is the cumulative product up to step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    variance: str = "posterior"

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a non-empty 1D array")
        if not ((b > 0) & (b < 1)).all():
            raise ValueError("every beta must lie in (0, 1)")
        if self.variance not in ("posterior", "beta"):
            raise ValueError("variance must be 'posterior' or 'beta'")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def alpha_bars_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        return self.betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)

    @property
    def sigmas(self) -> np.ndarray:
        var = self.posterior_variance if self.variance == "posterior" else self.betas
        return np.sqrt(var)

    def check_t(self, t) -> None:
        tt = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if tt.size == 0 or tt.min() < 1 or tt.max() > self.T:
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist(), "variance": self.variance}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls(np.asarray(d["betas"], dtype=np.float64), d.get("variance", "posterior"))


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                         variance: str = "posterior") -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64), variance)


def _coef(values: np.ndarray, t, like):
    """Gather ``values[t-1]`` broadcastable against ``like`` (scalar or per-batch t)."""
    if np.ndim(t) == 0:
        return float(values[int(t) - 1])
    if torch.is_tensor(like):
        idx = torch.as_tensor(t, device=like.device).long() - 1
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)[idx]
        return c.view(-1, *([1] * (like.ndim - 1)))
    return values[np.asarray(t) - 1].reshape(-1, *([1] * (np.ndim(like) - 1)))


def q_sample(x0, t, eps, sched: DiffusionSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    sched.check_t(t)
    ab = sched.alpha_bars
    return _coef(np.sqrt(ab), t, x0) * x0 + _coef(np.sqrt(1.0 - ab), t, x0) * eps


def predict_x0(x_t, t, eps, sched: DiffusionSchedule):
    ab = sched.alpha_bars
    return _coef(1.0 / np.sqrt(ab), t, x_t) * x_t - _coef(np.sqrt(1.0 / ab - 1.0), t, x_t) * eps


def p_mean(model_eps, x_t, t, sched: DiffusionSchedule, clip_denoised: bool = True):
    if not clip_denoised:
        coef = sched.betas / np.sqrt(1.0 - sched.alpha_bars)
        return _coef(1.0 / np.sqrt(sched.alphas), t, x_t) * (x_t - _coef(coef, t, x_t) * model_eps)
    x0 = predict_x0(x_t, t, model_eps, sched)
    x0 = x0.clamp(-1, 1) if torch.is_tensor(x0) else np.clip(x0, -1, 1)
    ab, abp = sched.alpha_bars, sched.alpha_bars_prev
    c0 = sched.betas * np.sqrt(abp) / (1.0 - ab)
    ct = (1.0 - abp) * np.sqrt(sched.alphas) / (1.0 - ab)
    return _coef(c0, t, x_t) * x0 + _coef(ct, t, x_t) * x_t


def p_step(model_eps, x_t, t: int, sched: DiffusionSchedule,
           generator: Optional[torch.Generator] = None, clip_denoised: bool = True,
           noise=None):
    """One ancestral step x_t -> x_{t-1}; no noise is added at t = 1."""
    sched.check_t(t)
    mean = p_mean(model_eps, x_t, t, sched, clip_denoised)
    if int(t) == 1:
        return mean
    if noise is None:
        if torch.is_tensor(x_t):
            dev = generator.device if generator is not None else x_t.device
            noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype, device=dev).to(x_t.device)
        else:
            noise = np.random.default_rng().standard_normal(np.shape(x_t))
    return mean + float(sched.sigmas[int(t) - 1]) * noise


def simple_loss(true_eps, pred_eps):
    """Mean squared error over all elements."""
    if tuple(true_eps.shape) != tuple(pred_eps.shape):
        raise ValueError(f"shape mismatch {tuple(true_eps.shape)} vs {tuple(pred_eps.shape)}")
    d = true_eps - pred_eps
    return (d * d).mean()


@torch.no_grad()
def sample_loop(eps_fn: Callable, shape, sched: DiffusionSchedule,
                generator: Optional[torch.Generator] = None, clip_denoised: bool = True,
                device="cpu", dtype=torch.float32, x_T=None):
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    ``eps_fn(x_t, t_batch)`` returns the predicted noise for a batch where
    ``t_batch`` is a long tensor filled with the current step.
    """
    x = x_T if x_T is not None else torch.randn(shape, generator=generator, dtype=dtype, device=device)
    for t in range(sched.T, 0, -1):
        tb = torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)
        x = p_step(eps_fn(x, tb), x, t, sched, generator=generator, clip_denoised=clip_denoised)
    return x
