"""Concept-mask extraction from layer-averaged cross-attention."""

from __future__ import annotations

import math

import numpy as np

from ..core import ConceptMask, DegenerateInputError, DimensionError

MAX_LLOYD_ITERATIONS = 100


def _check_map(avg_map) -> np.ndarray:
    a = np.asarray(avg_map)
    if a.ndim != 2:
        raise DimensionError(f"expected an (h, w) map, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("attention map has non-finite values")
    return a


def kmeans_split(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Two-cluster 1-D Lloyd iteration seeded at min and max.

    Returns ``(high, low_centroid, high_centroid)`` where ``high`` flags
    membership of the upper cluster. Equidistant points go to the lower
    cluster.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if not hi > lo:
        raise DegenerateInputError("constant map has no two clusters")
    high = np.abs(v - hi) < np.abs(v - lo)
    for _ in range(MAX_LLOYD_ITERATIONS):
        lo, hi = v[~high].mean(), v[high].mean()
        new = np.abs(v - hi) < np.abs(v - lo)
        if np.array_equal(new, high):
            break
        high = new
    return high, float(lo), float(hi)


def kmeans_mask(avg_map, seed: int = 0, concept_token: int = -1, source_step: int = -1) -> ConceptMask:
    """Mask of the higher-attention cluster of a 2-means split.

    Initialisation is deterministic, so ``seed`` does not change the result;
    it is accepted to keep the signature aligned with other mask methods.
    """
    a = _check_map(avg_map)
    high, _, _ = kmeans_split(a)
    return ConceptMask(concept_token, source_step, high.reshape(a.shape).astype(np.uint8))


def mask_size(ratio: float, positions: int) -> int:
    # round half up so ratio 0.5 of an odd count is deterministic across platforms
    return max(1, int(math.floor(ratio * positions + 0.5)))


def ratio_mask(avg_map, ratio: float, concept_token: int = -1, source_step: int = -1) -> ConceptMask:
    """Mask of the ``ratio`` share of positions with the largest attention.

    Ties at the cutoff go to the smaller row-major index.
    """
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    a = _check_map(avg_map)
    flat = a.ravel()
    k = mask_size(ratio, flat.size)
    order = np.argsort(-flat.astype(np.float64), kind="stable")
    grid = np.zeros(flat.size, dtype=np.uint8)
    grid[order[:k]] = 1
    return ConceptMask(concept_token, source_step, grid.reshape(a.shape))
