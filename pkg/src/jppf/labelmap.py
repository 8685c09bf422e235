"""Panoptic-part label maps: per-pixel (semantic, part, instance) triples."""
from __future__ import annotations

import os
from typing import BinaryIO

import numpy as np

from .tensors import ShapeError, TensorFormatError, read_tensor, write_tensor


class LabelMap:
    """Three stacked uint16 planes of shape [3, H, W].

    Plane order is (semantic, part, instance). Semantic id 0 is void; stuff
    and void pixels carry instance id 0.
    """

    __slots__ = ("planes",)

    def __init__(self, planes: np.ndarray):
        planes = np.asarray(planes)
        if planes.ndim != 3 or planes.shape[0] != 3:
            raise ShapeError(f"label map planes must be [3, H, W], got {planes.shape}")
        if planes.dtype != np.uint16:
            if planes.size and (planes.min() < 0 or planes.max() > np.iinfo(np.uint16).max):
                raise ValueError("label values must fit in uint16")
            planes = planes.astype(np.uint16)
        self.planes = np.ascontiguousarray(planes)

    @classmethod
    def from_planes(cls, semantic, part, instance) -> "LabelMap":
        return cls(np.stack([np.asarray(semantic), np.asarray(part), np.asarray(instance)]))

    @classmethod
    def void(cls, height: int, width: int) -> "LabelMap":
        return cls(np.zeros((3, height, width), np.uint16))

    @property
    def semantic(self) -> np.ndarray:
        return self.planes[0]

    @property
    def part(self) -> np.ndarray:
        return self.planes[1]

    @property
    def instance(self) -> np.ndarray:
        return self.planes[2]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.planes.shape[1], self.planes.shape[2]

    @property
    def void_mask(self) -> np.ndarray:
        return self.planes[0] == 0

    def copy(self) -> "LabelMap":
        return LabelMap(self.planes.copy())

    def __getitem__(self, yx) -> tuple[int, int, int]:
        y, x = yx
        return tuple(int(v) for v in self.planes[:, y, x])

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelMap) and np.array_equal(self.planes, other.planes)

    __hash__ = None

    def __repr__(self) -> str:
        return f"LabelMap({self.height}x{self.width}, void={int(self.void_mask.sum())})"


def write_labelmap(lm: LabelMap, sink: BinaryIO) -> None:
    write_tensor(lm.planes, sink)


def read_labelmap(source: BinaryIO) -> LabelMap:
    t = read_tensor(source)
    if t.dtype != np.uint16 or t.ndim != 3 or t.shape[0] != 3:
        raise TensorFormatError(f"not a label map container (dtype {t.dtype}, dims {t.shape})")
    return LabelMap(t)


def save_labelmap(path: str | os.PathLike, lm: LabelMap) -> None:
    with open(path, "wb") as fh:
        write_labelmap(lm, fh)


def load_labelmap(path: str | os.PathLike) -> LabelMap:
    with open(path, "rb") as fh:
        return read_labelmap(fh)
