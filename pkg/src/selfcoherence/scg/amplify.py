from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from ..core import AttentionTensor, ConceptMask, DimensionError, SCGError


class AmbiguousPairsError(SCGError, ValueError):
    """Two pairs would scale the same attention entry."""


MaskLike = Union[ConceptMask, np.ndarray]


def _grid(mask: MaskLike) -> np.ndarray:
    # raw arrays are accepted so an empty mask can be expressed
    grid = mask.grid if isinstance(mask, ConceptMask) else np.asarray(mask)
    return grid.astype(bool)


def scg_apply(
    amap: AttentionTensor,
    pairs: Sequence[tuple[MaskLike, int]],
    factor: float,
    renormalize_rows: bool = False,
) -> AttentionTensor:
    """Multiply bound-token attention by ``factor`` inside each concept's mask.

    Entry ``(p, q)`` is scaled iff ``q`` is some pair's bound token and that
    pair's mask is set at ``p``; every other entry is returned untouched. The
    factor is rounded to float32 once, so each scaled entry is a single
    float32 product. With ``renormalize_rows`` each position's token vector is
    rescaled to sum to 1 afterwards.
    """
    if not np.isfinite(factor) or factor <= 0:
        raise ValueError(f"amplification factor must be positive and finite, got {factor}")
    h, w, L = amap.shape
    c = np.float32(factor)
    selected: dict[int, np.ndarray] = {}
    for mask, bound in pairs:
        m = _grid(mask)
        if m.shape != (h, w):
            raise DimensionError(f"mask shape {m.shape} does not match map shape {(h, w)}")
        if not 0 <= bound < L:
            raise IndexError(f"bound token {bound} out of range for L={L}")
        if bound in selected:
            if (selected[bound] & m).any():
                raise AmbiguousPairsError(f"pairs sharing token {bound} have overlapping masks")
            selected[bound] = selected[bound] | m
        else:
            selected[bound] = m
    values = amap.values.copy()
    for bound, m in selected.items():
        values[m, bound] = values[m, bound] * c
    if renormalize_rows:
        v64 = values.astype(np.float64)
        values = (v64 / v64.sum(axis=-1, keepdims=True)).astype(np.float32)
    return amap.replace(values)


def touched_entries(pairs: Sequence[tuple[MaskLike, int]]) -> int:
    """Number of ``(p, q)`` entries scg_apply scales for ``pairs``."""
    return int(sum(int(_grid(mask).sum()) for mask, _ in pairs))
