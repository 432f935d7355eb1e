"""Ancestral DDPM sampling for the toy model."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .model import AttentionHook, ToyModel, forward_batch
from .schedule import DiffusionSchedule


def initial_latent(seed: int, shape) -> np.ndarray:
    return np.random.default_rng([seed, 0]).standard_normal(shape).astype(np.float32)


def step_noise(seed: int, t: int, shape) -> np.ndarray:
    return np.random.default_rng([seed, t]).standard_normal(shape).astype(np.float32)


def ddpm_update(
    z_t: np.ndarray,
    eps: np.ndarray,
    t: int,
    schedule: DiffusionSchedule,
    noise: np.ndarray | None,
    clip_denoised: bool = True,
):
    """One ancestral step ``z_t -> z_{t-1}`` given predicted noise.

    The mean is the Gaussian posterior mean given the clean estimate implied
    by ``eps``, clipped to [-1, 1] when ``clip_denoised`` is set (without
    clipping this equals ``(z_t - beta/sqrt(1-abar) eps) / sqrt(alpha)``).
    Uses the posterior variance; ``noise`` is ignored at ``t == 1``.
    """
    if t < 1:
        raise ValueError("t must be >= 1; z_0 is terminal")
    alpha, beta, ab = schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t)
    if clip_denoised:
        ab_prev = schedule.alpha_bar(t - 1)
        x0 = np.clip((z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -1.0, 1.0)
        mean = (np.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 + (np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)) * z_t
    else:
        mean = (z_t - (beta / np.sqrt(1.0 - ab)) * eps) / np.sqrt(alpha)
    if t > 1 and noise is not None:
        mean = mean + np.sqrt(schedule.posterior_variance(t)) * noise
    return mean.astype(np.float32)


def ddpm_step(model: ToyModel, z_t, t: int, text, schedule: DiffusionSchedule, noise_seed: int, hook=None):
    """Single-chain step. ``hook`` takes and returns an AttentionTensor."""
    if t < 1:
        raise ValueError("t must be >= 1; z_0 is terminal")
    z_t = np.asarray(z_t, dtype=np.float32)
    batch_hook = None if hook is None else (lambda b, m: hook(m))
    eps, _ = forward_batch(model, z_t[None], t, text, batch_hook)
    return ddpm_update(z_t, eps[0], t, schedule, step_noise(noise_seed, t, z_t.shape))


def latent_to_image(z0: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(z0, dtype=np.float32) + 1.0) * 0.5, 0.0, 1.0)


def sample(
    model,
    schedule: DiffusionSchedule,
    tokens: Sequence[int],
    seeds: Sequence[int],
    hook: AttentionHook | None = None,
    return_latents: bool = False,
):
    """Unguided batched sampling, one chain per seed. Returns (B, h, w, C) images.

    ``model`` is anything with a ``config`` (grid, channels) and a
    ``predict_noise(z, t, tokens, hook)`` method.
    """
    cfg = model.config
    shape = (*cfg.grid, cfg.channels)
    z = np.stack([initial_latent(s, shape) for s in seeds])
    for t in range(schedule.num_steps, 0, -1):
        eps, _ = model.predict_noise(z, t, tokens, hook)
        noise = np.stack([step_noise(s, t, shape) for s in seeds]) if t > 1 else None
        z = ddpm_update(z, eps, t, schedule, noise)
    return z if return_latents else latent_to_image(z)
