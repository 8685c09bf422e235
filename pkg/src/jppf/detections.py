"""Instance-head outputs and the pre-filtering applied before fusion."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .config import FusionConfig
from .tensors import BBox, ShapeError, load_tensor, save_tensor

DETS_HEADER = "JPPF-DETS v1"


class DetectionFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Detection:
    """One instance proposal.

    ``mask_logits`` holds raw (pre-sigmoid) logits aligned to ``box`` with
    shape ``(box.height, box.width)``; a leading singleton axis is accepted
    and dropped. ``instance_id`` is 0 until :func:`filter_detections` assigns
    one.
    """

    class_id: int
    score: float
    box: BBox
    mask_logits: np.ndarray
    instance_id: int = 0

    def __post_init__(self):
        box = BBox(*(int(v) for v in self.box))
        mask = np.asarray(self.mask_logits, dtype=np.float32)
        if mask.ndim == 3 and mask.shape[0] == 1:
            mask = mask[0]
        if mask.shape != (box.height, box.width):
            raise ShapeError(f"mask logits {mask.shape} do not match box {box.height}x{box.width}")
        if not 0.0 <= float(self.score) <= 1.0:
            raise ValueError(f"detection score {self.score} is outside [0, 1]")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "mask_logits", np.ascontiguousarray(mask))
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def binary_mask(self) -> np.ndarray:
        """Box-aligned mask binarized at logit 0 (sigmoid 0.5)."""
        return self.mask_logits > 0

    def full_mask(self, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), bool)
        ys, xs = self.box.slices
        out[ys, xs] = self.binary_mask
        return out

    def __eq__(self, other):
        if not isinstance(other, Detection):
            return NotImplemented
        return (self.class_id == other.class_id and self.score == other.score
                and self.box == other.box and self.instance_id == other.instance_id
                and np.array_equal(self.mask_logits, other.mask_logits))

    __hash__ = None


def filter_detections(dets: Sequence[Detection], config: FusionConfig = FusionConfig()) -> list[Detection]:
    """Confidence cut, score sort and greedy mask-overlap suppression.

    A detection is dropped when the fraction of its binarized mask already
    covered by the union of kept masks exceeds ``config.overlap_threshold``.
    Survivors get instance ids 1..K in kept order.
    """
    candidates = [d for d in dets if d.score >= config.confidence_threshold]
    candidates.sort(key=lambda d: -d.score)
    if not candidates:
        return []
    height = max(d.box.y1 for d in candidates)
    width = max(d.box.x1 for d in candidates)
    covered = np.zeros((height, width), bool)
    kept = []
    for d in candidates:
        mask = d.binary_mask
        area = int(mask.sum())
        ys, xs = d.box.slices
        overlap = int(np.count_nonzero(mask & covered[ys, xs]))
        if area and overlap / area > config.overlap_threshold:
            continue
        covered[ys, xs] |= mask
        kept.append(replace(d, instance_id=len(kept) + 1))
    return kept


def write_detections(path: str | os.PathLike, dets: Sequence[Detection], mask_dir: str | None = None) -> None:
    """Write the record file plus one mask container per detection.

    Mask paths are stored relative to the record file's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    stem = os.path.splitext(os.path.basename(path))[0]
    mask_dir = mask_dir or os.path.join(base, f"{stem}_masks")
    os.makedirs(mask_dir, exist_ok=True)
    lines = [DETS_HEADER]
    for i, d in enumerate(dets):
        mask_path = os.path.join(mask_dir, f"det_{i:04d}.jptf")
        save_tensor(mask_path, d.mask_logits[None])
        rel = os.path.relpath(mask_path, base)
        lines.append(f"{d.class_id};{d.score!r};{d.box.x0};{d.box.y0};{d.box.x1};{d.box.y1};{rel}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_detections(path: str | os.PathLike) -> list[Detection]:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != DETS_HEADER:
        raise DetectionFormatError(f"{path}: missing header {DETS_HEADER!r}")
    dets = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(";")
        if len(fields) != 7:
            raise DetectionFormatError(f"{path}: record {lineno} has {len(fields)} fields, expected 7")
        try:
            class_id, x0, y0, x1, y1 = (int(fields[i]) for i in (0, 2, 3, 4, 5))
            score = float(fields[1])
        except ValueError as exc:
            raise DetectionFormatError(f"{path}: record {lineno}: {exc}") from None
        mask_path = fields[6]
        if not os.path.isabs(mask_path):
            mask_path = os.path.join(base, mask_path)
        dets.append(Detection(class_id, score, BBox(x0, y0, x1, y1), load_tensor(mask_path)))
    return dets
