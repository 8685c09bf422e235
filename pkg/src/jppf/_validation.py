"""Input checks shared by the functional API and the estimators."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .detections import Detection
from .labelmap import LabelMap
from .taxonomy import THING, ClassCatalog, UnknownClassError
from .tensors import ShapeError


class CatalogMismatchError(ValueError):
    """Head tensors or detections disagree with the class catalog."""


def check_logits(t, name: str, n_channels: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(t)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must have shape [C, H, W], got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise TypeError(f"{name} must be floating point, got {arr.dtype}")
    if n_channels is not None and arr.shape[0] != n_channels:
        raise CatalogMismatchError(
            f"{name} has {arr.shape[0]} channels but the catalog expects {n_channels}")
    return np.ascontiguousarray(arr, dtype=np.float32)


def check_heads(sem, parts, catalog: ClassCatalog):
    sem = check_logits(sem, "semantic logits", catalog.n_classes)
    if parts is not None:
        parts = check_logits(parts, "part logits", catalog.n_part_channels)
        if parts.shape[1:] != sem.shape[1:]:
            raise ShapeError(f"part logits cover {parts.shape[1:]}, semantic logits {sem.shape[1:]}")
    return sem, parts


def check_detections_for(dets: Sequence[Detection], catalog: ClassCatalog,
                         height: int, width: int) -> list[Detection]:
    dets = list(dets)
    for d in dets:
        if not isinstance(d, Detection):
            raise TypeError(f"expected Detection, got {type(d).__name__}")
        try:
            kind = catalog.get(d.class_id).kind
        except UnknownClassError as exc:
            raise CatalogMismatchError(str(exc)) from None
        if kind != THING:
            raise CatalogMismatchError(f"detection class {d.class_id} is not a thing class")
        d.box.check(height, width)
    return dets


def check_same_shape(a: LabelMap, b: LabelMap) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"label maps differ in size: {a.shape} vs {b.shape}")
