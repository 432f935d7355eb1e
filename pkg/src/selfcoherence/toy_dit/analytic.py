"""Closed-form denoiser for checking guidance without training.

Attention is fixed by hand-set logits. The predicted clean image at each
cell is the attention-weighted mean of per-token target colours, and the
noise prediction is whatever makes that clean image consistent with
``z_t``. Because the final DDPM step returns the predicted clean image
exactly, a sampled image is a closed-form function of the (possibly edited)
attention maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import AttentionTensor, DimensionError, softmax_last_axis
from .schedule import DiffusionSchedule


@dataclass(frozen=True)
class AnalyticConfig:
    grid: tuple[int, int]
    channels: int = 3
    num_blocks: int = 1


class AnalyticDenoiser:
    def __init__(self, logits: np.ndarray, targets: np.ndarray, schedule: DiffusionSchedule, num_blocks: int = 1):
        logits = np.asarray(logits, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if logits.ndim != 3 or targets.ndim != 2 or targets.shape[0] != logits.shape[2]:
            raise DimensionError(f"logits {logits.shape} and targets {targets.shape} disagree on token count")
        h, w, _ = logits.shape
        self.config = AnalyticConfig((h, w), targets.shape[1], num_blocks)
        self.attention = softmax_last_axis(logits)
        self.targets = targets
        self.schedule = schedule

    @classmethod
    def two_objects(cls, grid, regions, colors, schedule: DiffusionSchedule, concept_logit: float = 4.0):
        """Fixture with tokens ``[colorA, conceptA, colorB, conceptB]``.

        Each concept token attends strongly inside its region; both colour
        tokens get equal logits everywhere, so unguided output mixes them.
        Concept tokens target mid-gray.
        """
        h, w = grid
        logits = np.zeros((h, w, 4))
        for i, region in enumerate(regions):
            logits[:, :, 2 * i + 1] = np.where(region, concept_logit, -concept_logit)
        targets = np.array([colors[0], (0.5, 0.5, 0.5), colors[1], (0.5, 0.5, 0.5)], dtype=np.float64)
        return cls(logits, targets, schedule)

    def clean_estimate(self, maps: list[np.ndarray]) -> np.ndarray:
        blends = []
        for a in maps:
            a64 = a.astype(np.float64)
            blends.append((a64 @ self.targets) / a64.sum(axis=-1, keepdims=True))
        return np.mean(blends, axis=0)

    def predict_noise(self, z, t: int, texts=None, hook=None):
        z = np.asarray(z, dtype=np.float32)
        h, w = self.config.grid
        if z.ndim != 4 or z.shape[1:] != (h, w, self.config.channels):
            raise DimensionError(f"latent shape {z.shape} does not match grid {self.config.grid}")
        ab = self.schedule.alpha_bar(t)
        eps = np.empty_like(z)
        captured = []
        for b in range(z.shape[0]):
            maps, used = [], []
            for n in range(self.config.num_blocks):
                amap = AttentionTensor(t, n, self.attention)
                maps.append(amap)
                used.append((hook(b, amap) if hook is not None else amap).values)
            x0 = self.clean_estimate(used) * 2.0 - 1.0
            eps[b] = ((z[b] - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)).astype(np.float32)
            captured.append(maps)
        return eps, captured


def region_color_distance(image: np.ndarray, region: np.ndarray, color) -> float:
    """Mean Euclidean RGB distance between ``region`` pixels and ``color``."""
    px = np.asarray(image, dtype=np.float64)[np.asarray(region, dtype=bool)]
    return float(np.linalg.norm(px - np.asarray(color, dtype=np.float64), axis=-1).mean())
