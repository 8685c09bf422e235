"""Color rendering of label maps.

Palette rule: each (semantic, part) pair is hashed with CRC-32 over the ASCII
text ``"s:p"``; with ``h`` the hash, hue = (h mod 3600) / 3600, saturation =
0.55 + 0.45 * ((h >> 12) mod 256) / 255 and value = 0.70 + 0.30 *
((h >> 20) mod 256) / 255. Void is black. Instance boundaries (thing pixels
with a 4-neighbour outside the same segment) are drawn white.
"""
from __future__ import annotations

import colorsys
import os
import zlib

import numpy as np
from PIL import Image

from .labelmap import LabelMap

WHITE = (255, 255, 255)


def pair_color(semantic: int, part: int) -> tuple[int, int, int]:
    if semantic == 0:
        return (0, 0, 0)
    h = zlib.crc32(f"{semantic}:{part}".encode("ascii"))
    hue = (h % 3600) / 3600
    sat = 0.55 + 0.45 * ((h >> 12) % 256) / 255
    val = 0.70 + 0.30 * ((h >> 20) % 256) / 255
    return tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(hue, sat, val))


def instance_outline(lm: LabelMap) -> np.ndarray:
    """Boolean map of thing pixels that touch a different segment."""
    seg = (lm.semantic.astype(np.int64) << 16) | lm.instance
    padded = np.pad(seg, 1, mode="edge")
    edge = np.zeros(seg.shape, bool)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        edge |= padded[1 + dy:1 + dy + seg.shape[0], 1 + dx:1 + dx + seg.shape[1]] != seg
    return edge & (lm.instance > 0)


def render(lm: LabelMap, outlines: bool = True) -> np.ndarray:
    """RGB uint8 image of shape (H, W, 3)."""
    pairs = np.stack([lm.semantic, lm.part], axis=-1).reshape(-1, 2)
    unique, inverse = np.unique(pairs, axis=0, return_inverse=True)
    colors = np.array([pair_color(int(s), int(p)) for s, p in unique], np.uint8).reshape(-1, 3)
    rgb = colors[inverse.ravel()].reshape(lm.height, lm.width, 3)
    if outlines:
        rgb[instance_outline(lm)] = WHITE
    return rgb


def save_png(path: str | os.PathLike, lm: LabelMap, outlines: bool = True) -> None:
    Image.fromarray(render(lm, outlines)).save(path, format="PNG")
