"""A tiny DiT-style text-conditioned noise predictor.

Each block is pre-norm self-attention, cross-attention over the text tokens,
then an MLP. Patch size is 1, so the cross-attention map has the same (h, w)
resolution as the image. Text is a bag of learned token embeddings with no
positional encoding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core import AttentionTensor, DimensionError

# (chain index, pooled map) -> replacement map
AttentionHook = Callable[[int, AttentionTensor], AttentionTensor]


class HookShapeError(DimensionError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_blocks: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    grid: tuple[int, int] = (16, 16)
    channels: int = 3
    num_steps: int = 50
    max_text_len: int = 8
    mlp_ratio: int = 2
    pos_embedding: str = "sincos"  # fixed 2-D sin-cos, or "learned"
    stem_kernel: int = 1  # receptive field of the pixel embedding; 1 is a plain per-pixel linear map
    latent_skip: bool = False  # eps = a_t * net + s_t * z_t with learned per-step scalars

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        if self.pos_embedding not in ("sincos", "learned"):
            raise ValueError(f"pos_embedding must be 'sincos' or 'learned', got {self.pos_embedding!r}")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ValueError("stem_kernel must be a positive odd number")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    tokens: tuple[int, ...]
    vectors: np.ndarray  # (L, d)


def sincos_2d(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed (h*w, dim) position table: half the channels encode the row, half the column."""
    if dim % 4:
        raise ValueError(f"sin-cos embedding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    rows, cols = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (rows.reshape(-1), cols.reshape(-1)):
        angles = coord[:, None] * freqs[None]
        parts += [torch.sin(angles), torch.cos(angles)]
    return torch.cat(parts, dim=1).float()


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, text, edit=None):
        """``edit(pooled)`` may return a replacement for the head-averaged map.

        Returns ``(out, pooled)`` where ``pooled`` is the map before editing.
        """
        B, P, D = x.shape
        L = text.shape[1]
        H, hd = self.num_heads, self.head_dim
        q = self.to_q(x).view(B, P, H, hd).transpose(1, 2)
        k = self.to_k(text).view(B, L, H, hd).transpose(1, 2)
        v = self.to_v(text).view(B, L, H, hd).transpose(1, 2)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)  # (B, H, P, L)
        pooled = weights.mean(dim=1)
        if edit is not None:
            new = edit(pooled)
            if new is not None:
                if new.shape != pooled.shape:
                    raise HookShapeError(f"hook returned map of shape {tuple(new.shape)}, expected {tuple(pooled.shape)}")
                # rescale every head by the factor the pooled map moved by; unchanged entries see a factor of exactly 1
                safe = torch.where(pooled > 0, pooled, torch.ones_like(pooled))
                ratio = new / safe
                weights = torch.where((pooled > 0).unsqueeze(1), weights * ratio.unsqueeze(1), new.unsqueeze(1))
        out = (weights @ v).transpose(1, 2).reshape(B, P, D)
        return self.proj(out), pooled


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, text, edit=None):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, need_weights=False)[0]
        out, amap = self.cross_attn(self.norm2(x), text, edit)
        x = x + out
        x = x + self.mlp(self.norm3(x))
        return x, amap


class ToyModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        h, w = config.grid
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.time_embedding = nn.Embedding(config.num_steps, d)
        if config.pos_embedding == "learned":
            self.pos_embedding = nn.Parameter(torch.randn(h * w, d) * 0.02)
        else:
            self.register_buffer("pos_embedding", sincos_2d(h, w, d), persistent=False)
        k = config.stem_kernel
        self.input_proj = nn.Conv2d(config.channels, d, k, padding=k // 2)
        self.blocks = nn.ModuleList(Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.num_blocks))
        self.final_norm = nn.LayerNorm(d)
        self.output_proj = nn.Linear(d, config.channels)
        if config.latent_skip:
            # starts as the plain prediction: a_t = 1, s_t = 0
            self.skip_scale = nn.Parameter(torch.ones(config.num_steps))
            self.skip_latent = nn.Parameter(torch.zeros(config.num_steps))

    def forward(self, z, t, tokens, edits: Sequence | None = None, return_maps: bool = False):
        """``z`` (B, h, w, C), ``t`` (B,) 1-based timesteps, ``tokens`` (B, L) ids.

        ``edits`` optionally holds one map-editing callable per block.
        """
        B, h, w, C = z.shape
        x = self.input_proj(z.permute(0, 3, 1, 2)).flatten(2).transpose(1, 2) + self.pos_embedding
        x = x + self.time_embedding(t - 1).unsqueeze(1)
        text = self.token_embedding(tokens)
        maps = []
        for n, block in enumerate(self.blocks):
            x, amap = block(x, text, None if edits is None else edits[n])
            if return_maps:
                maps.append(amap)
        eps = self.output_proj(self.final_norm(x)).reshape(B, h, w, C)
        if self.config.latent_skip:
            eps = self.skip_scale[t - 1].view(B, 1, 1, 1) * eps + self.skip_latent[t - 1].view(B, 1, 1, 1) * z
        return eps, maps

    def predict_noise(self, z, t: int, texts, hook: AttentionHook | None = None):
        return forward_batch(self, z, t, texts, hook)

    def embed_text(self, tokens) -> TextEmbedding:
        tokens = tuple(int(t) for t in tokens)
        self.check_tokens(tokens)
        with torch.no_grad():
            vecs = self.token_embedding(torch.tensor(tokens, dtype=torch.long)).numpy().copy()
        return TextEmbedding(tokens, vecs)

    def check_tokens(self, tokens) -> None:
        if len(tokens) == 0 or len(tokens) > self.config.max_text_len:
            raise DimensionError(f"text length {len(tokens)} outside 1..{self.config.max_text_len}")
        for tok in tokens:
            if not 0 <= tok < self.config.vocab_size:
                raise DimensionError(f"token id {tok} outside vocabulary of size {self.config.vocab_size}")


def build_model(config: ModelConfig, seed: int = 0) -> ToyModel:
    torch.manual_seed(seed)
    return ToyModel(config)


def _token_batch(model: ToyModel, texts, batch: int) -> torch.Tensor:
    if isinstance(texts, TextEmbedding):
        texts = [texts.tokens] * batch
    elif len(texts) and np.isscalar(texts[0]):
        texts = [tuple(texts)] * batch
    rows = [t.tokens if isinstance(t, TextEmbedding) else tuple(t) for t in texts]
    if len(rows) != batch:
        raise DimensionError(f"{len(rows)} texts for a batch of {batch}")
    for r in rows:
        model.check_tokens(r)
    if len({len(r) for r in rows}) != 1:
        raise DimensionError("all texts in a batch must have the same length")
    return torch.tensor(rows, dtype=torch.long)


def forward_batch(model: ToyModel, z, t: int, texts, hook: AttentionHook | None = None):
    """Batched noise prediction with attention capture.

    ``z`` is (B, h, w, C); ``texts`` a token sequence / TextEmbedding shared by
    the batch or one per chain. Returns ``(eps, maps)`` with ``eps`` as a
    float32 array and ``maps[b][n]`` the AttentionTensor of chain ``b``,
    block ``n``. ``hook(b, map)`` may return a replacement map per chain and
    block; returning the map unchanged leaves the output bit-identical.
    """
    cfg = model.config
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 4 or z.shape[1:] != (*cfg.grid, cfg.channels):
        raise DimensionError(f"latent shape {z.shape} does not match (B, {cfg.grid[0]}, {cfg.grid[1]}, {cfg.channels})")
    if not 1 <= t <= cfg.num_steps:
        raise ValueError(f"timestep {t} outside 1..{cfg.num_steps}")
    B = z.shape[0]
    h, w = cfg.grid
    tokens = _token_batch(model, texts, B)
    L = tokens.shape[1]
    captured: list[list[AttentionTensor]] = [[] for _ in range(B)]

    def make_edit(n):
        def edit(pooled):
            arr = pooled.detach().numpy().reshape(B, h, w, L)
            maps = [AttentionTensor(t, n, arr[b]) for b in range(B)]
            for b in range(B):
                captured[b].append(maps[b])
            if hook is None:
                return None
            out = np.empty_like(arr)
            for b in range(B):
                new = hook(b, maps[b])
                values = new.values if isinstance(new, AttentionTensor) else np.asarray(new, dtype=np.float32)
                if values.shape != (h, w, L):
                    raise HookShapeError(f"hook returned map of shape {values.shape}, expected {(h, w, L)}")
                out[b] = values
            if np.array_equal(out, arr):
                return None
            return torch.from_numpy(out.reshape(B, h * w, L))
        return edit

    edits = [make_edit(n) for n in range(cfg.num_blocks)]
    with torch.no_grad():
        eps, _ = model(torch.from_numpy(z), torch.full((B,), t, dtype=torch.long), tokens, edits)
    return eps.numpy(), captured


def forward(model: ToyModel, z_t, t: int, text, hook: Callable[[AttentionTensor], AttentionTensor] | None = None):
    """Single-chain noise prediction: ``(eps_hat (h, w, C), maps per block)``."""
    batch_hook = None if hook is None else (lambda b, m: hook(m))
    eps, maps = forward_batch(model, np.asarray(z_t, dtype=np.float32)[None], t, text, batch_hook)
    return eps[0], maps[0]
