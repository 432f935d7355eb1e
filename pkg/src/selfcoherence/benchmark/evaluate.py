"""Oracle binding check for toy images.

Shapes are found by template matching over the closed shape set, and a pair
counts as bound when the mean colour of its shape's region is nearest to the
bound colour among the vocabulary colours.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from ..scg.prompt import BindingPrompt
from ..toy_dit.dataset import PALETTE, shape_template


@dataclass
class PairResult:
    index: int
    matched: bool
    flag: str = ""  # "no-region" when the concept could not be located


@dataclass
class BindingScore:
    per_pair: list[PairResult] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return float(np.mean([p.matched for p in self.per_pair])) if self.per_pair else 0.0

    @property
    def flags(self) -> list[str]:
        return [f"pair{p.index}:{p.flag}" for p in self.per_pair if p.flag]


class ShapeDetector:
    """Locate known shapes in an image by template IoU over foreground blobs."""

    def __init__(self, shapes: Sequence[str], size: int, fg_threshold: float = 0.3, min_iou: float = 0.5):
        self.templates = {s: shape_template(s, size) for s in shapes}
        self.size = size
        self.fg_threshold = fg_threshold
        self.min_iou = min_iou

    def foreground(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        border = np.concatenate([img[0], img[-1], img[1:-1, 0], img[1:-1, -1]])
        background = np.median(border, axis=0)
        return np.linalg.norm(img - background, axis=-1) > self.fg_threshold

    def components(self, image: np.ndarray) -> list[np.ndarray]:
        labels, n = ndimage.label(self.foreground(image))
        return [labels == i for i in range(1, n + 1)]

    def iou(self, blob: np.ndarray, shape: str) -> float:
        """Best IoU of ``shape``'s template over every placement on the grid."""
        tmpl = self.templates[shape]
        h, w = blob.shape
        s = self.size
        pad = np.zeros((h + 2 * s, w + 2 * s), dtype=bool)
        pad[s:s + h, s:s + w] = blob
        area_blob = int(blob.sum())
        area_t = int(tmpl.sum())
        rows, cols = np.nonzero(blob)
        best = 0.0
        for r in range(rows.min() - s + 1, rows.max() + 1):
            for c in range(cols.min() - s + 1, cols.max() + 1):
                window = pad[r + s:r + 2 * s, c + s:c + 2 * s]
                inter = int((window & tmpl).sum())
                if inter:
                    best = max(best, inter / (area_blob + area_t - inter))
        return best

    def detect(self, image: np.ndarray, shapes: Sequence[str]) -> list[np.ndarray | None]:
        """Region for each requested shape, or None; blobs are used at most once."""
        blobs = self.components(image)
        scores = np.array([[self.iou(b, s) for b in blobs] for s in shapes]).reshape(len(shapes), len(blobs))
        best_total, best_assign = -1.0, None
        slots = list(range(len(blobs))) + [None] * len(shapes)
        for assign in itertools.permutations(slots, len(shapes)):
            total = 0.0
            for i, j in enumerate(assign):
                if j is not None and scores[i, j] >= self.min_iou:
                    total += scores[i, j]
                elif j is not None:
                    total = -1.0
                    break
            if total > best_total:
                best_total, best_assign = total, assign
        return [None if j is None else blobs[j] for j in best_assign]


def nearest_color(rgb: np.ndarray, colors: Mapping[str, Sequence[float]]) -> str:
    names = list(colors)
    dists = [np.linalg.norm(np.asarray(colors[n], dtype=np.float64) - rgb) for n in names]
    return names[int(np.argmin(dists))]


def evaluate_binding(
    image: np.ndarray,
    prompt: BindingPrompt,
    detector: ShapeDetector,
    colors: Sequence[str] | Mapping[str, Sequence[float]],
) -> BindingScore:
    palette = colors if isinstance(colors, Mapping) else {c: PALETTE[c] for c in colors}
    shapes = [prompt.words[p.concept] for p in prompt.pairs]
    regions = detector.detect(image, shapes)
    img = np.asarray(image, dtype=np.float64)
    score = BindingScore()
    for i, (pair, region) in enumerate(zip(prompt.pairs, regions)):
        if region is None:
            score.per_pair.append(PairResult(i, False, "no-region"))
            continue
        mean = img[region].mean(axis=0)
        score.per_pair.append(PairResult(i, nearest_color(mean, palette) == prompt.words[pair.bound]))
    return score


REPORT_HEADER = ("prompt_id", "seed", "accuracy", "flags")


def write_report(rows: Sequence[tuple[str, int, float, Sequence[str]]], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for pid, seed, acc, flags in rows:
            writer.writerow((pid, seed, f"{acc:.6f}", ";".join(flags)))
