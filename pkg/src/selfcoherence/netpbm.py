"""Binary PPM (P6) colour images and PBM (P4) bitmaps."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _header(raw: bytes, count: int) -> tuple[list[bytes], int]:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < count:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    return fields, pos + 1


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (h, w, 3) float image in [0, 1] as binary PPM (P6)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM export needs (h, w, 3), got {img.shape}")
    h, w, _ = img.shape
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = _header(raw, 4)
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a P6 PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(raw[pos:pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return (data.reshape(h, w, 3).astype(np.float32) / maxval)


def write_pbm(path, grid: np.ndarray) -> None:
    """Write a binary (h, w) grid as PBM (P4); set cells are stored as 1 (black)."""
    g = np.asarray(grid).astype(bool)
    if g.ndim != 2:
        raise ValueError(f"PBM export needs a 2-D grid, got {g.shape}")
    h, w = g.shape
    with open(path, "wb") as f:
        f.write(f"P4\n{w} {h}\n".encode("ascii"))
        f.write(np.packbits(g, axis=1).tobytes())


def read_pbm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = _header(raw, 3)
    if fields[0] != b"P4":
        raise ValueError(f"{path}: not a P4 PBM")
    w, h = int(fields[1]), int(fields[2])
    row = (w + 7) // 8
    data = np.frombuffer(raw[pos:pos + row * h], dtype=np.uint8)
    if data.size != row * h:
        raise ValueError(f"{path}: truncated bitmap")
    return np.unpackbits(data.reshape(h, row), axis=1)[:, :w].astype(np.uint8)
