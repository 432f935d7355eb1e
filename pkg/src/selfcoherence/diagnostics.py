"""Spatial attention entropy per (step, layer) and the SCGATT1 dump format.

SCGATT1 layout, all integers little-endian u32::

    b"SCGATT1" | count | count x {step, layer, h, w, L, h*w*L float32 LE}
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import AttentionTensor, SCGError

MAGIC = b"SCGATT1"
_RECORD = struct.Struct("<5I")
_COUNT = struct.Struct("<I")
CSV_HEADER = ("step", "layer", "token", "entropy_nats")


class DumpFormatError(SCGError, ValueError):
    pass


class BadMagicError(DumpFormatError):
    pass


class TruncatedDumpError(DumpFormatError):
    pass


class ManifestMismatchError(DumpFormatError):
    pass


class MissingMapsError(SCGError, LookupError):
    pass


def attention_entropy(amap: AttentionTensor, token: int) -> float:
    """Shannon entropy (nats) of ``token``'s attention spread over positions."""
    s = amap.token_slice(token).astype(np.float64).ravel()
    total = s.sum()
    if not total > 0:
        raise ValueError(f"token {token} has an all-zero attention slice at step {amap.step}, layer {amap.layer}")
    p = s / total
    nz = p[p > 0]
    return float(max(0.0, -(nz * np.log(nz)).sum()))


@dataclass
class EntropyProfile:
    token: int
    rows: list[tuple[int, int, float]] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            self.write_csv(f)

    def write_csv(self, f) -> None:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for step, layer, ent in self.rows:
            writer.writerow((step, layer, self.token, repr(ent)))

    def by_layer(self) -> dict[int, float]:
        """Mean entropy of each layer over all steps."""
        acc: dict[int, list[float]] = {}
        for _, layer, ent in self.rows:
            acc.setdefault(layer, []).append(ent)
        return {layer: float(np.mean(v)) for layer, v in sorted(acc.items())}


def _maps_of(source) -> list[AttentionTensor]:
    if hasattr(source, "attention_maps"):
        return source.attention_maps()
    return list(source)


def profile_run(source, token: int) -> EntropyProfile:
    """Entropy of ``token`` for every recorded (step, layer).

    ``source`` is a GuidanceTrace recorded with maps, or any iterable of
    AttentionTensor. Rows run in generation order: step descending, layer
    ascending.
    """
    maps = _maps_of(source)
    if not maps:
        raise MissingMapsError("no attention maps to profile")
    seen: dict[tuple[int, int], AttentionTensor] = {}
    for m in maps:
        key = (m.step, m.layer)
        if key in seen:
            raise ValueError(f"duplicate map for step {m.step}, layer {m.layer}")
        seen[key] = m
    layers = sorted({layer for _, layer in seen})
    expected = list(range(layers[-1] + 1))
    for step in sorted({s for s, _ in seen}):
        have = sorted(layer for s, layer in seen if s == step)
        if have != expected:
            missing = sorted(set(expected) - set(have))
            raise MissingMapsError(f"step {step} is missing layers {missing}")
    rows = []
    for (step, layer) in sorted(seen, key=lambda k: (-k[0], k[1])):
        m = seen[(step, layer)]
        if not 0 <= token < m.tokens:
            raise IndexError(f"token {token} out of range for L={m.tokens}")
        rows.append((step, layer, attention_entropy(m, token)))
    return EntropyProfile(token, rows)


def max_entropy(amap: AttentionTensor) -> float:
    return math.log(amap.height * amap.width)


def dump_tensors(maps: Iterable[AttentionTensor], path) -> None:
    maps = list(maps)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_COUNT.pack(len(maps)))
        for m in maps:
            h, w, L = m.shape
            f.write(_RECORD.pack(m.step, m.layer, h, w, L))
            f.write(np.ascontiguousarray(m.values, dtype="<f4").tobytes())


def load_tensors(path) -> list[AttentionTensor]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not an SCGATT1 dump")
    pos = len(MAGIC)
    if len(raw) < pos + _COUNT.size:
        raise TruncatedDumpError(f"{path}: missing record count")
    (count,) = _COUNT.unpack_from(raw, pos)
    pos += _COUNT.size
    maps = []
    for i in range(count):
        if len(raw) < pos + _RECORD.size:
            raise TruncatedDumpError(f"{path}: record {i} header truncated")
        step, layer, h, w, L = _RECORD.unpack_from(raw, pos)
        pos += _RECORD.size
        if min(h, w, L) == 0:
            raise ManifestMismatchError(f"{path}: record {i} declares empty shape {(h, w, L)}")
        nbytes = h * w * L * 4
        if len(raw) < pos + nbytes:
            raise TruncatedDumpError(f"{path}: record {i} declares {nbytes} payload bytes, {len(raw) - pos} remain")
        values = np.frombuffer(raw, dtype="<f4", count=h * w * L, offset=pos).reshape(h, w, L)
        maps.append(AttentionTensor(step, layer, values.astype(np.float32)))
        pos += nbytes
    if pos != len(raw):
        raise ManifestMismatchError(f"{path}: {len(raw) - pos} bytes beyond the {count} declared records")
    return maps
