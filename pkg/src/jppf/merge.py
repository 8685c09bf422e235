"""Top-down merge of a finished panoptic map with a part segmentation.

This is the two-stage baseline: non-partitionable pixels keep their panoptic
label, partitionable pixels take the part prediction when it belongs to the
pixel's class, and every conflicting pixel becomes void.
"""
from __future__ import annotations

import numpy as np

from .labelmap import LabelMap
from .taxonomy import ClassCatalog
from .tensors import ShapeError, argmax_channels


def part_map_from_logits(part_logits: np.ndarray) -> np.ndarray:
    """Hard part prediction (argmax over raw part logits), no thresholding."""
    return argmax_channels(part_logits).astype(np.uint16)


def top_down_merge(panoptic: LabelMap, parts: np.ndarray, catalog: ClassCatalog) -> LabelMap:
    parts = np.asarray(parts)
    if parts.shape != panoptic.shape:
        raise ShapeError(f"part map {parts.shape} does not match panoptic map {panoptic.shape}")
    if parts.size and int(parts.max()) >= catalog.n_part_channels:
        raise ValueError(f"part map value {int(parts.max())} >= N_P={catalog.n_part_channels}")
    tables = catalog.lookup_tables()
    semantic = panoptic.semantic
    if semantic.size and int(semantic.max()) >= len(tables["partitionable"]):
        raise ValueError(f"semantic id {int(semantic.max())} is not in the catalog")

    partitionable = tables["partitionable"][semantic]
    consistent = tables["allowed_parts"][semantic, parts]
    conflict = partitionable & ~consistent

    out = np.empty_like(panoptic.planes)
    out[0] = np.where(conflict, 0, semantic)
    out[1] = np.where(partitionable & consistent, parts, 0)
    out[2] = np.where(conflict, 0, panoptic.instance)
    return LabelMap(out)
