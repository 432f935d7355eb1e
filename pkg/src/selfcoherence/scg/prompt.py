from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

TASKS = ("coarse", "fine", "style")
PAIR_KINDS = ("attribute", "style")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class BindingPair:
    concept: int  # token index of the concept o_i
    bound: int  # token index of the attribute/style token r_i
    kind: str = "attribute"


@dataclass(frozen=True)
class BindingPrompt:
    """A tokenized prompt plus the concept/attribute pairs guidance should bind.

    ``words`` are the content tokens in prompt order; ``tokens`` their ids in
    whatever vocabulary the prompt was built against. Pair indices point into
    these sequences, not into the vocabulary.
    """

    words: tuple[str, ...]
    tokens: tuple[int, ...]
    pairs: tuple[BindingPair, ...]
    task: str = "coarse"
    raw_text: str = ""
    place: str | None = None
    subject: str | None = None  # the whole object in a fine-grained prompt

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if self.task not in TASKS:
            raise PromptError(f"unknown task {self.task!r}")
        if len(self.words) != len(self.tokens):
            raise PromptError("words and tokens differ in length")
        if not self.pairs:
            raise PromptError("prompt has no binding pairs")
        seen: set[int] = set()
        n = len(self.tokens)
        for pair in self.pairs:
            if pair.kind not in PAIR_KINDS:
                raise PromptError(f"unknown pair kind {pair.kind!r}")
            for idx in (pair.concept, pair.bound):
                if not 0 <= idx < n:
                    raise PromptError(f"pair index {idx} outside prompt of length {n}")
            if pair.concept == pair.bound:
                raise PromptError("a pair cannot bind a token to itself")
            if pair.concept in seen or pair.bound in seen:
                raise PromptError("token indices repeat across pairs")
            seen.update((pair.concept, pair.bound))

    @property
    def length(self) -> int:
        return len(self.tokens)

    def pair_words(self) -> list[tuple[str, str]]:
        return [(self.words[p.concept], self.words[p.bound]) for p in self.pairs]

    def to_dict(self) -> dict:
        d = {
            "words": list(self.words),
            "tokens": list(self.tokens),
            "pairs": [[p.concept, p.bound, p.kind] for p in self.pairs],
            "task": self.task,
            "text": self.raw_text,
        }
        if self.place is not None:
            d["place"] = self.place
        if self.subject is not None:
            d["subject"] = self.subject
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BindingPrompt":
        return cls(
            words=tuple(d["words"]),
            tokens=tuple(d["tokens"]),
            pairs=tuple(BindingPair(int(c), int(b), k) for c, b, k in d["pairs"]),
            task=d.get("task", "coarse"),
            raw_text=d.get("text", ""),
            place=d.get("place"),
            subject=d.get("subject"),
        )


def pairs_from_words(words: Sequence[str], bindings: Sequence[tuple[str, str]], kind: str = "attribute"):
    """Build pairs from ``(concept_word, bound_word)`` tuples by first occurrence."""
    pairs = []
    for concept, bound in bindings:
        pairs.append(BindingPair(list(words).index(concept), list(words).index(bound), kind))
    return tuple(pairs)
