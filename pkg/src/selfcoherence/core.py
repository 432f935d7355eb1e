"""Dense-tensor helpers and the attention-map data model.

Tensors are plain ``numpy`` float32 arrays in C (row-major) order. Reductions
accumulate in float64 and are cast back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class SCGError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SCGError, ValueError):
    pass


class NonFiniteError(SCGError, ValueError):
    pass


class DegenerateInputError(SCGError, ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(f"{what} has non-finite value {x[idx]!r} at index {idx}")


@dataclass(frozen=True, eq=False)
class AttentionTensor:
    """One block's cross-attention map at one denoising step, shaped (h, w, L)."""

    step: int
    layer: int
    values: np.ndarray

    def __post_init__(self):
        values = as_tensor(self.values)
        if values.ndim != 3:
            raise DimensionError(f"attention values must be (h, w, L), got shape {values.shape}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def tokens(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    def token_slice(self, token: int) -> np.ndarray:
        if not 0 <= token < self.tokens:
            raise IndexError(f"token {token} out of range for L={self.tokens}")
        return self.values[:, :, token]

    def replace(self, values: np.ndarray) -> "AttentionTensor":
        return AttentionTensor(self.step, self.layer, values)

    def __eq__(self, other):
        if not isinstance(other, AttentionTensor):
            return NotImplemented
        return (
            self.step == other.step
            and self.layer == other.layer
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True, eq=False)
class ConceptMask:
    """Binary (h, w) grid locating one concept token."""

    concept_token: int
    source_step: int
    grid: np.ndarray = field(repr=False)

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2:
            raise DimensionError(f"mask grid must be 2-D, got shape {grid.shape}")
        if not np.isin(grid, (0, 1)).all():
            raise ValueError("mask grid must contain only 0 and 1")
        if not grid.any():
            raise DegenerateInputError(f"empty mask for concept token {self.concept_token}")
        grid = grid.astype(np.uint8)
        grid.flags.writeable = False
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape  # type: ignore[return-value]

    def __eq__(self, other):
        if not isinstance(other, ConceptMask):
            return NotImplemented
        return (
            self.concept_token == other.concept_token
            and self.source_step == other.source_step
            and np.array_equal(self.grid, other.grid)
        )


def softmax_last_axis(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 1:
        raise DimensionError("softmax needs rank >= 1")
    check_finite(x, "softmax input")
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=-1, keepdims=True))
    return as_tensor(e / e.sum(axis=-1, keepdims=True))


def cross_attention(q, k, v, height: int, width: int, step: int = 0, layer: int = 0):
    """Single-head cross-attention of ``h*w`` spatial queries over ``L`` text tokens.

    Returns ``(out, map)`` where ``out`` is (h*w, d_v) and ``map`` the
    (h, w, L) attention tensor.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"q, k, v must be 2-D, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1] or q.shape[1] < 1:
        raise DimensionError(f"query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key count {k.shape} does not match value count {v.shape}")
    if q.shape[0] != height * width:
        raise DimensionError(f"query count {q.shape[0]} != {height}x{width}")
    d = q.shape[1]
    logits = (q.astype(np.float64) @ k.astype(np.float64).T) / np.sqrt(d)
    weights = softmax_last_axis(logits)
    out = as_tensor(weights.astype(np.float64) @ v.astype(np.float64))
    amap = AttentionTensor(step, layer, weights.reshape(height, width, k.shape[0]))
    return out, amap


def average_attention_maps(maps: Sequence[AttentionTensor], token: int) -> np.ndarray:
    """Mean of ``token``'s (h, w) slice over every layer in ``maps``."""
    if not maps:
        raise ValueError("no attention maps to average")
    shape, step = maps[0].shape, maps[0].step
    for m in maps:
        if m.shape != shape:
            raise DimensionError(f"attention map shapes differ: {shape} vs {m.shape}")
        if m.step != step:
            raise ValueError(f"attention maps come from different steps: {step} vs {m.step}")
    if not 0 <= token < shape[2]:
        raise IndexError(f"token {token} out of range for L={shape[2]}")
    acc = np.zeros(shape[:2], dtype=np.float64)
    for m in maps:
        acc += m.values[:, :, token]
    return as_tensor(acc / len(maps))
