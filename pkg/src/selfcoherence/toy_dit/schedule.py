from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Linear beta schedule over ``num_steps`` noising steps.

    Timesteps are 1-based: ``z_t`` for ``t`` in ``1..T`` has signal level
    ``alpha_bar(t)``; ``z_0`` is the clean sample. Arrays are stored 0-based,
    so ``betas[t - 1]`` is the variance added going from ``z_{t-1}`` to ``z_t``.
    """

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D array")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("every beta must lie in (0, 1)")
        betas.flags.writeable = False
        object.__setattr__(self, "betas", betas)

    @classmethod
    def linear(cls, num_steps: int = 50, beta_start: float | None = None, beta_end: float | None = None):
        # defaults keep alpha_bar(T) near 1e-3 for any T; at T=50 betas run 0.001..0.25
        beta_start = 0.05 / num_steps if beta_start is None else beta_start
        beta_end = min(12.5 / num_steps, 0.999) if beta_end is None else beta_end
        return cls(np.linspace(beta_start, beta_end, num_steps))

    @property
    def num_steps(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_variance(self, t: int) -> float:
        return (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}
