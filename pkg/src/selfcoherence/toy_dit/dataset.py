"""Synthetic two-shape scenes with bag-of-words captions.

Every scene holds two different shapes, each filled with its own colour. The
caption keeps only the four content words, and the text encoder has no
positional signal, so "red square, blue disc" and "blue square, red disc"
reach the model as the same input. Which colour lands on which shape is
therefore a coin flip for an unguided model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..scg.prompt import BindingPair, BindingPrompt

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}

SHAPES = ("square", "disc", "triangle", "cross")


class DatasetConfigError(ValueError):
    pass


def shape_template(name: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` footprint of a named shape."""
    i, j = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if name == "square":
        # one-pixel inset so the square's area is close to the disc's
        return (i >= 1) & (i < size - 1) & (j >= 1) & (j < size - 1) if size > 4 else np.ones((size, size), bool)
    if name == "disc":
        return (i - c) ** 2 + (j - c) ** 2 <= (size / 2.0) ** 2
    if name == "triangle":
        return np.abs(j - c) <= (i + 0.5) * (size / 2.0) / size + 1e-9
    if name == "cross":
        arm = max(1, size // 5)
        return (np.abs(i - c) <= arm) | (np.abs(j - c) <= arm)
    raise DatasetConfigError(f"unknown shape {name!r}")


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise DatasetConfigError("duplicate vocabulary words")

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.words.index(word)
        except ValueError:
            raise KeyError(f"{word!r} not in vocabulary") from None

    def encode(self, words) -> tuple[int, ...]:
        return tuple(self.id(w) for w in words)


@dataclass(frozen=True)
class DatasetConfig:
    shapes: tuple[str, ...] = ("square", "disc", "triangle")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    grid: tuple[int, int] = (16, 16)
    shape_size: int = 7
    gap: int = 1
    num_samples: int = 2048

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "colors", tuple(self.colors))
        object.__setattr__(self, "grid", tuple(self.grid))
        if len(self.shapes) < 2:
            raise DatasetConfigError("need at least 2 shapes")
        if len(self.colors) < 4:
            raise DatasetConfigError("need at least 4 colors")
        for s in self.shapes:
            if s not in SHAPES:
                raise DatasetConfigError(f"unknown shape {s!r}; known: {SHAPES}")
        for c in self.colors:
            if c not in PALETTE:
                raise DatasetConfigError(f"unknown color {c!r}; known: {tuple(PALETTE)}")
        h, w = self.grid
        fits_row = 2 * self.shape_size + self.gap <= w and self.shape_size <= h
        fits_col = 2 * self.shape_size + self.gap <= h and self.shape_size <= w
        if not (fits_row or fits_col):
            raise DatasetConfigError(f"two {self.shape_size}px shapes do not fit a {h}x{w} grid")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.colors + self.shapes)

    def to_dict(self) -> dict:
        return {
            "shapes": list(self.shapes),
            "colors": list(self.colors),
            "grid": list(self.grid),
            "shape_size": self.shape_size,
            "gap": self.gap,
            "num_samples": self.num_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ToySample:
    image: np.ndarray  # (h, w, 3) in [0, 1]
    prompt: BindingPrompt
    layout: tuple[tuple[str, np.ndarray], ...] = field(repr=False)  # (shape name, region) per concept


def coarse_prompt(vocab: Vocabulary, bindings) -> BindingPrompt:
    """Prompt for ``[(color, shape), (color, shape)]`` in the toy vocabulary."""
    words: list[str] = []
    pairs = []
    for color, shape in bindings:
        words += [color, shape]
        pairs.append(BindingPair(len(words) - 1, len(words) - 2, "attribute"))
    text = " and ".join(f"a {c} {s}" for c, s in bindings)
    return BindingPrompt(tuple(words), vocab.encode(words), tuple(pairs), "coarse", text)


def place_boxes(rng: np.random.Generator, grid, size: int, gap: int) -> tuple[tuple[int, int], tuple[int, int]]:
    h, w = grid
    while True:
        a = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
        b = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
        apart_rows = abs(a[0] - b[0]) >= size + gap
        apart_cols = abs(a[1] - b[1]) >= size + gap
        if apart_rows or apart_cols:
            return a, b


def render_scene(grid, size: int, items) -> tuple[np.ndarray, tuple[tuple[str, np.ndarray], ...]]:
    """Render ``items`` = ``[(shape, color, (row, col)), ...]`` on a black canvas."""
    h, w = grid
    image = np.zeros((h, w, 3), dtype=np.float32)
    layout = []
    for shape, color, (r, c) in items:
        region = np.zeros((h, w), dtype=bool)
        region[r:r + size, c:c + size] = shape_template(shape, size)
        image[region] = PALETTE[color]
        layout.append((shape, region))
    return image, tuple(layout)


def make_sample(config: DatasetConfig, rng: np.random.Generator) -> ToySample:
    vocab = config.vocabulary
    shape_idx = rng.choice(len(config.shapes), size=2, replace=False)
    color_idx = rng.choice(len(config.colors), size=2, replace=False)
    shapes = [config.shapes[i] for i in shape_idx]
    colors = [config.colors[i] for i in color_idx]
    boxes = place_boxes(rng, config.grid, config.shape_size, config.gap)
    image, layout = render_scene(config.grid, config.shape_size, list(zip(shapes, colors, boxes)))
    prompt = coarse_prompt(vocab, list(zip(colors, shapes)))
    return ToySample(image, prompt, layout)


def make_dataset(config: DatasetConfig, seed: int) -> list[ToySample]:
    rng = np.random.default_rng(seed)
    return [make_sample(config, rng) for _ in range(config.num_samples)]
