"""Mask export: binary PGM (P5) per mask and RGB PPM (P6) overlays."""

from __future__ import annotations

import re
import warnings
from pathlib import Path

import numpy as np

from .errors import IngestionError

PALETTE = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 128, 0),
    (128, 0, 255),
    (0, 128, 128),
    (128, 128, 128),
)


def _gates_grid(gates, D: int) -> np.ndarray:
    g = np.asarray(gates)
    if isinstance(gates, str):
        g = np.frombuffer(gates.encode(), dtype=np.uint8) - ord("0")
    if g.size != D * D:
        raise ValueError(f"mask has {g.size} entries, grid needs {D * D}")
    return g.reshape(D, D).astype(bool)


def write_pgm(path, gates, D: int) -> None:
    """Row-major D x D image, 255 where the gate is on."""
    pixels = np.where(_gates_grid(gates, D), 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{D} {D}\n255\n".encode() + pixels.tobytes())


def overlay_rgb(masks, D: int) -> np.ndarray:
    """Additive colour blend of task masks, saturating at 255."""
    if len(masks) > len(PALETTE):
        warnings.warn(f"{len(masks)} tasks but only {len(PALETTE)} palette colours; colours repeat",
                      stacklevel=2)
    acc = np.zeros((D, D, 3), dtype=np.int64)
    for t, gates in enumerate(masks):
        colour = np.array(PALETTE[t % len(PALETTE)])
        acc += _gates_grid(gates, D)[:, :, None] * colour
    return np.minimum(acc, 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


_HEADER = re.compile(rb"\A(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pnm(path) -> np.ndarray:
    """Parse a binary PGM/PPM written by this module (no comments)."""
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m:
        raise IngestionError("not a binary PGM/PPM file", path, 0)
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise IngestionError(f"unsupported maxval {maxval}", path, m.start(4))
    channels = 3 if kind == b"P6" else 1
    body = raw[m.end():]
    if len(body) != w * h * channels:
        raise IngestionError(f"expected {w * h * channels} pixel bytes, found {len(body)}", path, m.end())
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def read_pgm_gates(path) -> np.ndarray:
    img = read_pnm(path)
    if img.ndim != 2:
        raise IngestionError("expected a greyscale PGM", path, 0)
    return (img.reshape(-1) > 0).astype(np.float64)
