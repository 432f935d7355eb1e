"""Structured binding prompts: templates, generation, VQA-style questions."""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..scg.planner import RatioTable
from ..scg.prompt import BindingPair, BindingPrompt


class VocabularyError(ValueError):
    pass


class TemplateMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    task: str
    pattern: str
    question_count: int

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(re.findall(r"\[(\w+)\]", self.pattern))

    @property
    def has_place(self) -> bool:
        return "place" in self.slots


COARSE = PromptTemplate("coarse", "a [colorA] [conceptA] and a [colorB] [conceptB]", 2)
COARSE_PLACE = PromptTemplate("coarse", "a [colorA] [conceptA] and a [colorB] [conceptB] in the [place]", 3)
FINE = PromptTemplate("fine", "a [concept] with a [colorA] [partA] and a [colorB] [partB]", 2)
STYLE = PromptTemplate("style", "a [styleA] [conceptA] and a [styleB] [conceptB]", 2)
TEMPLATES = (COARSE, COARSE_PLACE, FINE, STYLE)

PAPER_COUNTS = {"coarse": 54, "fine": 56, "style": 48}
TASK_ORDER = ("coarse", "fine", "style")


def _default_parts() -> dict[str, list[str]]:
    table = RatioTable.load()
    return {subject: sorted(parts) for subject, parts in table._ratios.items()}


@dataclass(frozen=True)
class BenchmarkVocab:
    colors: tuple[str, ...] = (
        "red", "blue", "green", "yellow", "black", "pink", "purple", "orange", "white", "brown", "gray",
    )
    concepts: tuple[str, ...] = (
        "backpack", "balloon", "rabbit", "bowl", "dog", "bench", "cat", "bear", "car", "chair",
        "clock", "crown", "frog", "horse", "lion", "monkey", "turtle", "bird", "suitcase", "apple",
    )
    places: tuple[str, ...] = ("kitchen", "street", "park", "forest", "beach", "desert", "library", "garden")
    styles: tuple[str, ...] = (
        "anime", "photorealistic", "cyberpunk", "watercolor", "impressionist", "pixel-art", "sketch", "oil-painting",
    )
    style_concepts: tuple[str, ...] = (
        "cat", "kitchen", "dog", "castle", "car", "forest", "robot", "city", "girl", "mountain", "spider-man", "house",
    )
    parts: Mapping[str, Sequence[str]] = field(default_factory=_default_parts)

    def words(self) -> list[str]:
        """Every word, deduplicated in first-seen order; index = token id."""
        out: dict[str, None] = {}
        groups: Iterable[Iterable[str]] = (
            self.colors, self.concepts, self.places, self.styles, self.style_concepts, self.parts.keys(),
            *self.parts.values(),
        )
        for group in groups:
            for w in group:
                out.setdefault(w, None)
        return list(out)

    def to_dict(self) -> dict:
        return {
            "colors": list(self.colors),
            "concepts": list(self.concepts),
            "places": list(self.places),
            "styles": list(self.styles),
            "style_concepts": list(self.style_concepts),
            "parts": {k: list(v) for k, v in self.parts.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkVocab":
        kw = {k: tuple(v) for k, v in d.items() if k != "parts"}
        if "parts" in d:
            kw["parts"] = {k: tuple(v) for k, v in d["parts"].items()}
        return cls(**kw)


def article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


class _Encoder:
    def __init__(self, vocab: BenchmarkVocab):
        self.ids = {w: i for i, w in enumerate(vocab.words())}

    def __call__(self, words) -> tuple[int, ...]:
        return tuple(self.ids[w] for w in words)


def _two_distinct(rng: np.random.Generator, pool: Sequence[str]) -> tuple[str, str]:
    i, j = rng.choice(len(pool), size=2, replace=False)
    return pool[int(i)], pool[int(j)]


def _build(template: PromptTemplate, vocab: BenchmarkVocab, rng: np.random.Generator, encode) -> BindingPrompt:
    if template.task == "coarse":
        ca, cb = _two_distinct(rng, vocab.colors)
        oa, ob = _two_distinct(rng, vocab.concepts)
        words = [ca, oa, cb, ob]
        text = f"a {ca} {oa} and a {cb} {ob}"
        place = None
        if template.has_place:
            place = vocab.places[int(rng.integers(len(vocab.places)))]
            words.append(place)
            text += f" in the {place}"
        pairs = (BindingPair(1, 0, "attribute"), BindingPair(3, 2, "attribute"))
        return BindingPrompt(tuple(words), encode(words), pairs, "coarse", text, place=place)
    if template.task == "fine":
        subjects = [s for s in sorted(vocab.parts) if len(vocab.parts[s]) >= 2]
        subject = subjects[int(rng.integers(len(subjects)))]
        pa, pb = _two_distinct(rng, list(vocab.parts[subject]))
        ca, cb = _two_distinct(rng, vocab.colors)
        words = [subject, ca, pa, cb, pb]
        text = f"{article(subject)} {subject} with a {ca} {pa} and a {cb} {pb}"
        pairs = (BindingPair(2, 1, "attribute"), BindingPair(4, 3, "attribute"))
        return BindingPrompt(tuple(words), encode(words), pairs, "fine", text, subject=subject)
    if template.task == "style":
        sa, sb = _two_distinct(rng, vocab.styles)
        oa, ob = _two_distinct(rng, vocab.style_concepts)
        words = [sa, oa, sb, ob]
        text = f"a {sa} {oa} and a {sb} {ob}"
        pairs = (BindingPair(1, 0, "style"), BindingPair(3, 2, "style"))
        return BindingPrompt(tuple(words), encode(words), pairs, "style", text)
    raise ValueError(f"unknown task {template.task!r}")


def _capacity(template: PromptTemplate, vocab: BenchmarkVocab) -> int:
    def perms(n):
        return n * (n - 1)

    if template.task == "coarse":
        return perms(len(vocab.colors)) * perms(len(vocab.concepts)) * (len(vocab.places) if template.has_place else 1)
    if template.task == "fine":
        return perms(len(vocab.colors)) * sum(perms(len(p)) for p in vocab.parts.values())
    return perms(len(vocab.styles)) * perms(len(vocab.style_concepts))


def generate_prompts(
    templates: Sequence[PromptTemplate],
    vocab: BenchmarkVocab,
    counts: Mapping[str, int],
    seed: int,
) -> list[BindingPrompt]:
    """Draw ``counts[task]`` distinct prompts per task, cycling that task's templates.

    Within a prompt the two colours (or styles) and the two concepts (or
    parts) always differ.
    """
    rng = np.random.default_rng(seed)
    encode = _Encoder(vocab)
    out: list[BindingPrompt] = []
    for task in TASK_ORDER:
        n = counts.get(task, 0)
        if n == 0:
            continue
        task_templates = [t for t in templates if t.task == task]
        if not task_templates:
            raise ValueError(f"no template for task {task!r}")
        if task == "fine" and not any(len(p) >= 2 for p in vocab.parts.values()):
            raise VocabularyError("no fine-grained subject has two parts")
        pools = {"coarse": vocab.colors, "fine": vocab.colors, "style": vocab.styles}
        if len(pools[task]) < 2 or (task == "coarse" and len(vocab.concepts) < 2) or (
            task == "style" and len(vocab.style_concepts) < 2
        ):
            raise VocabularyError(f"vocabulary too small for distinct {task} slots")
        if task == "coarse" and any(t.has_place for t in task_templates) and not vocab.places:
            raise VocabularyError("coarse template needs places but none are given")
        if sum(_capacity(t, vocab) for t in task_templates) < n:
            raise VocabularyError(f"vocabulary cannot produce {n} distinct {task} prompts")
        seen: set[str] = set()
        made: list[BindingPrompt] = []
        cycle = itertools.cycle(task_templates)
        attempts = 0
        while len(made) < n:
            attempts += 1
            if attempts > 1000 * n:
                raise VocabularyError(f"could not draw {n} distinct {task} prompts")
            p = _build(next(cycle), vocab, rng, encode)
            if p.raw_text in seen:
                continue
            seen.add(p.raw_text)
            made.append(p)
        out.extend(made)
    return out


def paper_preset(seed: int = 0, vocab: BenchmarkVocab | None = None) -> list[BindingPrompt]:
    """54 coarse (all with a place), 56 fine and 48 style prompts."""
    return generate_prompts((COARSE_PLACE, FINE, STYLE), vocab or BenchmarkVocab(), PAPER_COUNTS, seed)


_QUESTION_PATTERNS = (
    ("coarse", re.compile(r"^(an? \S+ \S+) and (an? \S+ \S+) in (the \S+)$")),
    ("fine", re.compile(r"^an? \S+ with (an? \S+ \S+) and (an? \S+ \S+)$")),
    ("coarse", re.compile(r"^(an? \S+ \S+) and (an? \S+ \S+)$")),
)


def decompose_questions(prompt: BindingPrompt | str) -> list[str]:
    """Split a templated prompt into one question per bound fragment (plus the place)."""
    text = prompt if isinstance(prompt, str) else prompt.raw_text
    norm = " ".join(text.strip().rstrip(".").split())
    for _, pattern in _QUESTION_PATTERNS:
        m = pattern.match(norm)
        if m:
            return [g + "?" for g in m.groups()]
    raise TemplateMismatchError(f"prompt matches no known template: {text!r}")


def question_count(prompt: BindingPrompt) -> int:
    if prompt.task == "coarse" and prompt.place is not None:
        return 3
    return 2


def prompt_id(index: int, prompt: BindingPrompt) -> str:
    return f"{prompt.task}-{index:03d}"


def write_jsonl(prompts: Sequence[BindingPrompt], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, p in enumerate(prompts):
            record = {
                "id": prompt_id(i, p),
                "task": p.task,
                "text": p.raw_text,
                "pairs": [[p.words[q.concept], p.words[q.bound]] for q in p.pairs],
                "questions": decompose_questions(p),
                "prompt": p.to_dict(),
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path) -> list[tuple[str, BindingPrompt]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append((rec["id"], BindingPrompt.from_dict(rec["prompt"])))
    return out
