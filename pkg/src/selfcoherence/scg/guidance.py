"""Guided denoising: masks from step t+1 steer the attention of step t.

Each step runs two forwards. The first is unguided; its layer-averaged
concept maps give the masks for the *next* step. The second reruns the step
with every block's cross-attention map passed through :func:`scg_apply`
using the masks carried over from the previous step, and its noise
prediction advances the chain. The first step has no carried masks and uses
the unguided prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import AttentionTensor, ConceptMask, SCGError, average_attention_maps
from ..netpbm import write_pbm
from ..toy_dit.sampling import ddpm_update, initial_latent, latent_to_image, step_noise
from ..toy_dit.schedule import DiffusionSchedule
from .amplify import scg_apply
from .masks import kmeans_mask, ratio_mask
from .planner import PlannerClient, RatioPlan, RatioTable, plan_ratio
from .prompt import BindingPrompt

log = logging.getLogger(__name__)

MASK_METHODS = ("auto", "kmeans", "ratio")
RATIO_SOURCES = ("static-table", "external-planner")


class TraceOverflowError(SCGError, MemoryError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance knobs.

    ``active_steps`` is an inclusive ``(first, last)`` range of 1-based
    timesteps that get the guided pass; ``None`` means every step but the
    first (``1..T-1``) and a range with ``first > last`` disables guidance.
    ``mask_method="auto"`` picks k-means for coarse and style prompts and
    ratio masks for fine-grained ones.
    """

    amplification_factor: float = 4.0
    mask_method: str = "auto"
    renormalize_rows: bool = False
    active_steps: tuple[int, int] | None = None
    ratio_source: str = "static-table"
    record_maps: bool = False
    max_trace_bytes: int = 64 * 2**20

    def __post_init__(self):
        if not self.amplification_factor >= 1.0:
            raise ValueError(f"amplification factor must be >= 1, got {self.amplification_factor}")
        if self.mask_method not in MASK_METHODS:
            raise ValueError(f"mask_method must be one of {MASK_METHODS}")
        if self.ratio_source not in RATIO_SOURCES:
            raise ValueError(f"ratio_source must be one of {RATIO_SOURCES}")
        if self.active_steps is not None:
            object.__setattr__(self, "active_steps", tuple(int(s) for s in self.active_steps))

    @classmethod
    def disabled(cls, **kw) -> "GuidanceConfig":
        return cls(active_steps=(1, 0), **kw)

    def step_range(self, num_steps: int) -> tuple[int, int]:
        lo, hi = self.active_steps if self.active_steps is not None else (1, num_steps - 1)
        if lo <= hi and not (1 <= lo and hi <= num_steps):
            raise ValueError(f"active_steps {self.active_steps} outside 1..{num_steps}")
        return lo, hi

    def is_active(self, t: int, num_steps: int) -> bool:
        lo, hi = self.step_range(num_steps)
        return lo <= t <= hi

    def method_for(self, prompt: BindingPrompt) -> str:
        if self.mask_method != "auto":
            return self.mask_method
        return "ratio" if prompt.task == "fine" else "kmeans"

    def to_dict(self) -> dict:
        return {
            "amplification_factor": self.amplification_factor,
            "mask_method": self.mask_method,
            "renormalize_rows": self.renormalize_rows,
            "active_steps": None if self.active_steps is None else list(self.active_steps),
            "ratio_source": self.ratio_source,
            "record_maps": self.record_maps,
            "max_trace_bytes": self.max_trace_bytes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        d = dict(d)
        if d.get("active_steps") is not None:
            d["active_steps"] = tuple(d["active_steps"])
        return cls(**d)


@dataclass
class StepRecord:
    t: int
    source: str  # "guided" or "unguided": which pass produced z_{t-1}
    masks: list[ConceptMask] = field(default_factory=list)  # extracted here, applied at t-1
    applied: list[ConceptMask] = field(default_factory=list)  # carried over from t+1
    maps_pre: list[AttentionTensor] | None = None
    maps_post: list[AttentionTensor] | None = None


@dataclass
class GuidanceTrace:
    seed: int
    prompt: BindingPrompt
    amplification_factor: float
    ratio_plans: list[RatioPlan] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)

    def attention_maps(self) -> list[AttentionTensor]:
        """Recorded unguided maps of every step, in generation order."""
        out = []
        for rec in self.steps:
            if rec.maps_pre is None:
                raise ValueError(f"step {rec.t} has no recorded maps; sample with record_maps=True")
            out.extend(rec.maps_pre)
        return out

    def write_masks(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for rec in self.steps:
            for i, mask in enumerate(rec.masks):
                path = directory / f"step{rec.t:03d}_pair{i}.pbm"
                write_pbm(path, mask.grid)
                written.append(path)
        return written


def resolve_ratios(
    prompt: BindingPrompt,
    cfg: GuidanceConfig,
    table: RatioTable | None = None,
    client: PlannerClient | None = None,
) -> list[RatioPlan]:
    if cfg.method_for(prompt) != "ratio":
        return []
    table = table if table is not None else RatioTable.load()
    plans = []
    for pair in prompt.pairs:
        part = prompt.words[pair.concept]
        concept = prompt.subject or part
        plans.append(plan_ratio(concept, part, cfg.ratio_source, table, client))
    return plans


def extract_masks(
    maps: Sequence[AttentionTensor],
    prompt: BindingPrompt,
    cfg: GuidanceConfig,
    seed: int = 0,
    ratios: Sequence[float] | None = None,
    table: RatioTable | None = None,
    client: PlannerClient | None = None,
) -> list[ConceptMask]:
    """One mask per pair from the layer-averaged concept-token maps of one step."""
    method = cfg.method_for(prompt)
    if method == "ratio" and ratios is None:
        ratios = [p.ratio for p in resolve_ratios(prompt, cfg, table, client)]
    step = maps[0].step if maps else -1
    masks = []
    for i, pair in enumerate(prompt.pairs):
        avg = average_attention_maps(maps, pair.concept)
        if method == "kmeans":
            masks.append(kmeans_mask(avg, seed, pair.concept, step))
        else:
            masks.append(ratio_mask(avg, ratios[i], pair.concept, step))
    return masks


def trace_bytes(model, prompt: BindingPrompt, num_steps: int) -> int:
    h, w = model.config.grid
    return 2 * num_steps * model.config.num_blocks * h * w * prompt.length * 4


def guided_sample_batch(
    model,
    schedule: DiffusionSchedule,
    prompt: BindingPrompt,
    cfg: GuidanceConfig,
    seeds: Sequence[int],
    table: RatioTable | None = None,
    client: PlannerClient | None = None,
) -> tuple[np.ndarray, list[GuidanceTrace]]:
    """Run one guided chain per seed, batched through the model.

    Returns images ``(B, h, w, C)`` in [0, 1] and one trace per seed.
    """
    T = schedule.num_steps
    cfg.step_range(T)
    if cfg.record_maps and trace_bytes(model, prompt, T) > cfg.max_trace_bytes:
        raise TraceOverflowError(
            f"recording maps needs {trace_bytes(model, prompt, T)} bytes per chain, budget is {cfg.max_trace_bytes}"
        )
    plans = resolve_ratios(prompt, cfg, table, client)
    ratios = [p.ratio for p in plans]
    shape = (*model.config.grid, model.config.channels)
    seeds = list(seeds)
    B = len(seeds)
    c = cfg.amplification_factor
    traces = [GuidanceTrace(s, prompt, c, list(plans)) for s in seeds]
    z = np.stack([initial_latent(s, shape) for s in seeds])
    carried: list[list[ConceptMask]] | None = None

    for t in range(T, 0, -1):
        eps, maps = model.predict_noise(z, t, prompt.tokens)
        masks = None
        if t > 1 and cfg.is_active(t - 1, T):
            masks = [extract_masks(maps[b], prompt, cfg, seeds[b], ratios) for b in range(B)]
        post: list[list[AttentionTensor]] = [[] for _ in range(B)]
        guided = carried is not None and cfg.is_active(t, T)
        if guided:
            pairs = [[(carried[b][i], pair.bound) for i, pair in enumerate(prompt.pairs)] for b in range(B)]

            def hook(b, amap, pairs=pairs):
                new = scg_apply(amap, pairs[b], c, cfg.renormalize_rows)
                if cfg.record_maps:
                    post[b].append(new)
                return new

            eps, _ = model.predict_noise(z, t, prompt.tokens, hook)
        for b in range(B):
            traces[b].steps.append(
                StepRecord(
                    t,
                    "guided" if guided else "unguided",
                    masks[b] if masks is not None else [],
                    carried[b] if guided else [],
                    maps[b] if cfg.record_maps else None,
                    post[b] if cfg.record_maps and guided else None,
                )
            )
        noise = np.stack([step_noise(s, t, shape) for s in seeds]) if t > 1 else None
        z = ddpm_update(z, eps, t, schedule, noise)
        carried = masks
    return latent_to_image(z), traces


def guided_sample(
    model,
    schedule: DiffusionSchedule,
    prompt: BindingPrompt,
    cfg: GuidanceConfig,
    seed: int,
    table: RatioTable | None = None,
    client: PlannerClient | None = None,
) -> tuple[np.ndarray, GuidanceTrace]:
    images, traces = guided_sample_batch(model, schedule, prompt, cfg, [seed], table, client)
    return images[0], traces[0]
