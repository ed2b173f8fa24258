"""
Diffusion Noise Schedule
========================

Linear-beta DDPM schedule, forward noising, the epsilon-prediction loss and
the ancestral reverse step used with a strided inference schedule.

Every stochastic quantity (epsilon, injected sampling noise) is passed in by
the caller; nothing in this module owns RNG state.
"""

import math
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

import config

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta / cumulative-alpha tables indexed by timestep (float64)"""
    T: int
    betas: torch.Tensor
    alphas_cumprod: torch.Tensor

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t; t = -1 is the clean end of the chain (ᾱ = 1)"""
        if t == -1:
            return 1.0
        self.check_timestep(t)
        return float(self.alphas_cumprod[t])

    def check_timestep(self, t: int) -> None:
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")


@dataclass
class LatentSequence:
    """Per-segment latents (L, C_z, h, w); timestep is None for clean z_0"""
    data: torch.Tensor
    timestep: Optional[int] = None

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"latents must be (L, C, h, w), got shape {tuple(self.data.shape)}")
        if self.data.shape[0] < 1:
            raise ValueError("latent sequence needs at least one frame")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent sequence contains non-finite values")

    @property
    def shape(self):
        return tuple(self.data.shape)


def make_schedule(T: int = config.NUM_TRAIN_TIMESTEPS,
                  beta_start: float = config.BETA_START,
                  beta_end: float = config.BETA_END) -> NoiseSchedule:
    """
    Build a linear-beta noise schedule

    Parameters:
    T: Total diffusion steps
    beta_start: First beta
    beta_end: Last beta

    Returns:
    NoiseSchedule with float64 tables
    """
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")

    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(T=T, betas=betas, alphas_cumprod=alphas_cumprod)


def _check_same_shape(a: LatentSequence, b: LatentSequence, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def q_sample(z0: LatentSequence, t: int, eps: LatentSequence, s: NoiseSchedule) -> LatentSequence:
    """Forward noising z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε"""
    _check_same_shape(z0, eps, "q_sample")
    s.check_timestep(t)
    a_bar = s.alpha_bar(t)
    z_t = math.sqrt(a_bar) * z0.data + math.sqrt(1.0 - a_bar) * eps.data
    return LatentSequence(z_t, timestep=t)


def predict_start(z_t: LatentSequence, eps_hat: LatentSequence, t: int, s: NoiseSchedule) -> torch.Tensor:
    """Clean-latent estimate implied by a noise prediction"""
    _check_same_shape(z_t, eps_hat, "predict_start")
    a_bar = s.alpha_bar(t)
    return (z_t.data - math.sqrt(1.0 - a_bar) * eps_hat.data) / math.sqrt(a_bar)


def denoising_loss(eps, eps_hat) -> torch.Tensor:
    """
    Mean squared error between true and predicted noise

    Accepts LatentSequences or raw tensors (batched training passes tensors).
    Returns a scalar tensor so it can be backpropagated.
    """
    a = eps.data if isinstance(eps, LatentSequence) else eps
    b = eps_hat.data if isinstance(eps_hat, LatentSequence) else eps_hat
    if a.shape != b.shape:
        raise ValueError(f"denoising_loss: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.mse_loss(b, a)


def subsample_timesteps(T: int, steps: int) -> List[int]:
    """
    Uniformly strided inference timesteps

    Parameters:
    T: Training schedule length
    steps: Number of inference steps

    Returns:
    Strictly decreasing list of `steps` timesteps ending at 0
    """
    if T < 1 or steps < 1:
        raise ValueError(f"T and steps must be positive, got T={T}, steps={steps}")
    if steps > T:
        raise ValueError(f"cannot take {steps} steps from a {T}-step schedule")
    stride = T // steps
    return [k * stride for k in reversed(range(steps))]


def ddpm_reverse_step(z_t: LatentSequence, eps_hat: LatentSequence, t: int, t_prev: int,
                      s: NoiseSchedule, noise: Optional[LatentSequence] = None) -> LatentSequence:
    """
    One ancestral step from t to t_prev (t_prev = -1 is the final step)

    Uses the posterior q(z_{t_prev} | z_t, ẑ_0) of the strided chain with
    variance β̃ = (1−ᾱ_prev)/(1−ᾱ_t)·(1−ᾱ_t/ᾱ_prev). No noise is injected at
    the final step.
    """
    _check_same_shape(z_t, eps_hat, "ddpm_reverse_step")
    s.check_timestep(t)
    if not (t > t_prev >= -1):
        raise ValueError(f"reverse step must move backwards: t={t}, t_prev={t_prev}")

    a_bar = s.alpha_bar(t)
    a_bar_prev = s.alpha_bar(t_prev)
    alpha = a_bar / a_bar_prev
    beta = 1.0 - alpha

    z0_hat = predict_start(z_t, eps_hat, t, s)
    coef_start = math.sqrt(a_bar_prev) * beta / (1.0 - a_bar)
    coef_current = math.sqrt(alpha) * (1.0 - a_bar_prev) / (1.0 - a_bar)
    mean = coef_start * z0_hat + coef_current * z_t.data

    if t_prev == -1:
        return LatentSequence(mean, timestep=None)

    if noise is not None:
        _check_same_shape(z_t, noise, "ddpm_reverse_step noise")
        variance = (1.0 - a_bar_prev) / (1.0 - a_bar) * beta
        mean = mean + math.sqrt(max(variance, 1e-20)) * noise.data
    return LatentSequence(mean, timestep=t_prev)


def timestep_pairs(timesteps: List[int]):
    """(t, t_prev) pairs for a decreasing schedule, ending with (0, -1)"""
    return list(zip(timesteps, timesteps[1:] + [-1]))


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed for a stream keyed by (seed, stage, step, ...)"""
    if any(int(p) < 0 for p in parts):
        raise ValueError(f"seed parts must be non-negative, got {parts}")
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])
