"""
Core diffusion mechanics: noise schedule, forward/reverse processes,
training loss, and ancestral sampling.

Everything here is a pure function over immutable inputs; randomness is
always injected by the caller. Timesteps are 1-based in every public
signature (t in [1, T]); the 0-based array indexing is confined to this
module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import torch

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """The beta/alpha/alpha-bar sequences governing diffusion.

    Float32 tensors are what training consumes; the float64 arrays keep
    the cumulative product at full precision (a 500-term product loses
    digits in float32).
    """

    betas: torch.Tensor       # (T,) float32
    alphas: torch.Tensor      # (T,) float32, 1 - betas
    alpha_bars: torch.Tensor  # (T,) float32, cumprod of alphas
    betas_f64: np.ndarray
    alphas_f64: np.ndarray
    alpha_bars_f64: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])


def build_linear_schedule(
    num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end inclusive."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"beta endpoints must satisfy 0 < start <= end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    if num_steps == 1:
        betas64 = np.array([beta_start], dtype=np.float64)
    else:
        betas64 = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas64 = 1.0 - betas64
    alpha_bars64 = np.cumprod(alphas64)
    return NoiseSchedule(
        betas=torch.from_numpy(betas64.astype(np.float32)),
        alphas=torch.from_numpy(alphas64.astype(np.float32)),
        alpha_bars=torch.from_numpy(alpha_bars64.astype(np.float32)),
        betas_f64=betas64,
        alphas_f64=alphas64,
        alpha_bars_f64=alpha_bars64,
    )


def _check_t(t: Timestep, sched: NoiseSchedule) -> np.ndarray:
    """Validate a 1-based timestep (int or batch tensor), return 0-based indices."""
    idx = np.atleast_1d(np.asarray(t if not torch.is_tensor(t) else t.cpu().numpy()))
    if idx.min() < 1 or idx.max() > sched.num_steps:
        raise ValueError(f"timestep {t} outside [1, {sched.num_steps}]")
    return idx - 1


def _coef(values: np.ndarray, idx: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    """Gather per-timestep coefficients, broadcastable against `like`.

    A scalar t yields a 0-dim tensor; a batch of t's yields (B, 1, ..., 1).
    """
    v = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
    if v.numel() == 1:
        return v.reshape(())
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def _check_shapes(*tensors: torch.Tensor) -> None:
    shapes = {tuple(x.shape) for x in tensors}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def forward_sample(
    x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Closed-form forward marginal: sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps."""
    _check_shapes(x0, eps)
    idx = _check_t(t, sched)
    ab = sched.alpha_bars_f64
    return _coef(np.sqrt(ab), idx, x0) * x0 + _coef(np.sqrt(1.0 - ab), idx, x0) * eps


def forward_step(
    x_prev: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """One Markov step of q(x_t | x_{t-1}): sqrt(1 - b_t) x + sqrt(b_t) eps."""
    _check_shapes(x_prev, eps)
    idx = _check_t(t, sched)
    b = sched.betas_f64
    return _coef(np.sqrt(1.0 - b), idx, x_prev) * x_prev + _coef(np.sqrt(b), idx, x_prev) * eps


def posterior_mean(
    x_t: torch.Tensor, t: Timestep, predicted_eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Reverse-process mean: (x_t - b_t / sqrt(1 - a_bar_t) * eps) / sqrt(a_t)."""
    _check_shapes(x_t, predicted_eps)
    idx = _check_t(t, sched)
    b, a, ab = sched.betas_f64, sched.alphas_f64, sched.alpha_bars_f64
    eps_coef = _coef(b / np.sqrt(1.0 - ab), idx, x_t)
    return (x_t - eps_coef * predicted_eps) * _coef(1.0 / np.sqrt(a), idx, x_t)


def reverse_variance(sched: NoiseSchedule, mode: str = "beta") -> np.ndarray:
    """Fixed reverse variance sigma_t^2 per timestep.

    "beta" uses b_t; "beta_tilde" uses the posterior variance
    (1 - a_bar_{t-1}) / (1 - a_bar_t) * b_t  (zero at t=1).
    """
    b, ab = sched.betas_f64, sched.alpha_bars_f64
    if mode == "beta":
        return b.copy()
    if mode == "beta_tilde":
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        return (1.0 - ab_prev) / (1.0 - ab) * b
    raise ValueError(f"unknown variance mode {mode!r}")


def reverse_step(
    x_t: torch.Tensor,
    t: Timestep,
    predicted_eps: torch.Tensor,
    z: torch.Tensor,
    sched: NoiseSchedule,
    variance: str = "beta",
) -> torch.Tensor:
    """One ancestral sampling step: posterior_mean + sigma_t * z.

    The caller passes z = 0 at t = 1 (noiseless final step).
    """
    mean = posterior_mean(x_t, t, predicted_eps, sched)
    idx = _check_t(t, sched)
    sigma = _coef(np.sqrt(reverse_variance(sched, variance)), idx, x_t)
    return mean + sigma * z


def simple_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between injected and predicted noise."""
    _check_shapes(eps_true, eps_pred)
    return ((eps_true - eps_pred) ** 2).mean()


def ancestral_sample(
    denoise_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    sched: NoiseSchedule,
    shape: tuple,
    generator: Optional[torch.Generator] = None,
    variance: str = "beta",
) -> torch.Tensor:
    """Full T-step ancestral sampling from pure noise.

    `denoise_fn(x_t, t)` receives a 1-based per-item timestep tensor and
    returns the predicted noise.
    """
    x = torch.randn(shape, generator=generator)
    for t in range(sched.num_steps, 0, -1):
        t_batch = torch.full((shape[0],), t, dtype=torch.long)
        with torch.no_grad():
            eps = denoise_fn(x, t_batch)
        if t > 1:
            z = torch.randn(shape, generator=generator)
        else:
            z = torch.zeros(shape)
        x = reverse_step(x, t, eps, z, sched, variance=variance)
    return x
