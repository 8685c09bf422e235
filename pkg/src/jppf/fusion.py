"""Joint panoptic-part fusion of semantic, instance and part head outputs.

The pipeline for one image:

1. softmax-normalize the semantic and part logits (``normalize_heads``),
2. pre-filter the detections,
3. per kept instance, fuse the box-masked semantic channel, the pasted mask
   logits and the class's part channels with
   ``FL = (sum of sigmoid(l)) * (sum of l)``,
4. fuse every stuff channel with the part background channel the same way,
5. argmax over all fused channels, fill the non-thing pixels with the
   semantic stuff prediction, and void stuff regions below ``min_stuff``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from skimage import measure

from ._validation import check_detections_for, check_heads
from .config import FusionConfig
from .detections import Detection, filter_detections
from .labelmap import LabelMap
from .taxonomy import BACKGROUND_CHANNEL, ClassCatalog, part_channels_for_class
from .tensors import BBox, mask_by_bbox, max_argmax_channels, sigmoid, softmax_terms

__all__ = [
    "FusionConfig", "FusedLogitStack", "fuse_masked_logits", "build_masked_logits",
    "fuse_instance", "fuse_stuff", "assemble_canvas", "jppf", "panoptic_fuse_two",
]


@dataclass(frozen=True, eq=False)
class FusedLogitStack:
    """Fused scores plus a channel legend of (semantic id, part id, instance id).

    When ``box`` is set, ``logits`` only covers that box and every value
    outside it is exactly 0 (the fused value of all-zero masked logits).
    """

    logits: np.ndarray
    legend: tuple[tuple[int, int, int], ...]
    image_shape: tuple[int, int]
    box: Optional[BBox] = None

    def __post_init__(self):
        if len(self.legend) != self.logits.shape[0]:
            raise ValueError(f"legend has {len(self.legend)} entries for {self.logits.shape[0]} channels")

    @property
    def n_channels(self) -> int:
        return self.logits.shape[0]

    def dense(self) -> np.ndarray:
        if self.box is None:
            return self.logits
        out = np.zeros((self.n_channels,) + tuple(self.image_shape), np.float32)
        ys, xs = self.box.slices
        out[:, ys, xs] = self.logits
        return out


def fuse_masked_logits(mll: Sequence[np.ndarray]) -> np.ndarray:
    """``(sum_l sigmoid(l)) * (sum_l l)`` elementwise over a set of logit arrays.

    Terms are summed in ascending order per element so the result does not
    depend on the order of ``mll`` (float addition is not associative).
    """
    if len(mll) == 0:
        raise ValueError("need at least one set of logits to fuse")
    arrays = [np.asarray(a, dtype=np.float32) for a in mll]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError(f"logit sets differ in shape: {[a.shape for a in arrays]}")
    if len(arrays) == 1:
        return sigmoid(arrays[0]) * arrays[0]
    if len(arrays) == 2:
        a, b = arrays
        return (sigmoid(a) + sigmoid(b)) * (a + b)
    if len(arrays) == 3:
        a, b, c = arrays
        return _fuse3(a, b, c, sigmoid(a), sigmoid(b))
    stacked = np.sort(np.stack(arrays), axis=0)
    sig = sigmoid(stacked)
    total = stacked[0].copy()
    total_sig = sig[0].copy()
    for i in range(1, len(arrays)):
        total += stacked[i]
        total_sig += sig[i]
    return total_sig * total


def _sorted_sum3(a, b, c):
    # (min + median) + max, i.e. the ascending-order sum, without a sort
    lo_ab, hi_ab = np.minimum(a, b), np.maximum(a, b)
    lo = np.minimum(lo_ab, c)
    hi = np.maximum(hi_ab, c)
    mid = np.maximum(lo_ab, np.minimum(hi_ab, c))
    return (lo + mid) + hi


def _fuse3(a, b, c, sig_a, sig_b):
    # sigmoid is monotone, so summing the sigmoids in ascending order equals
    # summing sigmoid(sorted values); a and b may broadcast against c
    return _sorted_sum3(sig_a, sig_b, sigmoid(c)) * _sorted_sum3(a, b, c)


class _Head:
    """Read access to a head's channels, optionally softmax-normalized.

    With ``eager=False`` the softmax is evaluated only over the requested
    pixels. Values are bit-identical either way since every op is per pixel.
    """

    def __init__(self, logits: np.ndarray, normalize: bool, eager: bool = True):
        self.logits = np.asarray(logits, dtype=np.float32)
        self.normalize = normalize
        self.exps = self.denom = None
        if normalize and eager:
            self.exps, self.denom = softmax_terms(self.logits)

    def take(self, channels, ys=slice(None), xs=slice(None)) -> np.ndarray:
        if not self.normalize:
            return np.ascontiguousarray(self.logits[channels, ys, xs])
        if self.exps is not None:
            return self.exps[channels, ys, xs] / self.denom[ys, xs]
        exps, denom = softmax_terms(self.logits[:, ys, xs])
        return exps[channels] / denom

    def take_pixels(self, channel: int, flat_index: np.ndarray) -> np.ndarray:
        cols = self.logits.reshape(self.logits.shape[0], -1)[:, flat_index]
        if not self.normalize:
            return cols[channel]
        exps, denom = softmax_terms(cols[:, None, :])
        return exps[channel, 0] / denom[0]


def build_masked_logits(det: Detection, sem: np.ndarray, parts: np.ndarray,
                        catalog: ClassCatalog) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-resolution (MLS, MLI, MLP) for one detection, each [P, H, W].

    ``sem`` and ``parts`` are expected to be normalized already.
    """
    channels = part_channels_for_class(catalog, det.class_id)
    n = len(channels)
    h, w = sem.shape[1:]
    box = det.box.check(h, w)
    sem_channel = catalog.channel_of(det.class_id)
    mls = mask_by_bbox(np.asarray(sem, np.float32)[sem_channel:sem_channel + 1], box)
    mli = np.zeros((1, h, w), np.float32)
    ys, xs = box.slices
    mli[0, ys, xs] = det.mask_logits
    mlp = mask_by_bbox(np.asarray(parts, np.float32)[channels], box)
    return np.repeat(mls, n, axis=0), np.repeat(mli, n, axis=0), mlp


def _fuse_instance(det: Detection, sem: _Head, parts: Optional[_Head], catalog: ClassCatalog,
                   image_shape) -> tuple[FusedLogitStack, Optional[np.ndarray]]:
    """Box-cropped fused stack plus the crop of the (normalized) part background."""
    ys, xs = det.box.slices
    mls = sem.take(catalog.channel_of(det.class_id), ys, xs)
    mli = det.mask_logits
    if parts is None:
        fused = fuse_masked_logits([mls, mli])[None]
        return FusedLogitStack(fused, ((det.class_id, 0, det.instance_id),), tuple(image_shape), det.box), None
    channels = part_channels_for_class(catalog, det.class_id)
    # the background crop is also needed for the stuff score inside the box
    wanted = channels if channels[0] == BACKGROUND_CHANNEL else [BACKGROUND_CHANNEL, *channels]
    crop = parts.take(wanted, ys, xs)
    mlp = crop[len(wanted) - len(channels):]
    # MLS and MLI are identical across the replicated part channels
    fused = _fuse3(mls, mli, mlp, sigmoid(mls), sigmoid(mli))
    # non-partitionable classes select only the background channel, i.e. part id 0
    legend = tuple((det.class_id, p, det.instance_id) for p in channels)
    return FusedLogitStack(fused, legend, tuple(image_shape), det.box), crop[BACKGROUND_CHANNEL]


def fuse_instance(det: Detection, sem: np.ndarray, parts: np.ndarray,
                  catalog: ClassCatalog) -> FusedLogitStack:
    """Fused logits of one kept detection over its part channels (box-cropped)."""
    sem = np.asarray(sem, np.float32)
    det.box.check(*sem.shape[1:])
    return _fuse_instance(det, _Head(sem, False), _Head(parts, False), catalog, sem.shape[1:])[0]


def _stuff_legend(catalog: ClassCatalog):
    stuff = catalog.stuff_classes
    return [catalog.channel_of(c.class_id) for c in stuff], tuple((c.class_id, 0, 0) for c in stuff)


def fuse_stuff(sem: np.ndarray, parts: np.ndarray, catalog: ClassCatalog) -> FusedLogitStack:
    """Fuse every stuff channel of ``sem`` with the part background channel."""
    channels, legend = _stuff_legend(catalog)
    sem = np.asarray(sem, np.float32)
    background = np.asarray(parts, np.float32)[BACKGROUND_CHANNEL]
    return FusedLogitStack(_fuse_stuff_values(sem[channels], background), legend, sem.shape[1:])


def _fuse_stuff_values(stuff: np.ndarray, background: Optional[np.ndarray]) -> np.ndarray:
    # Two-term fusion is commutative, so broadcasting the shared background
    # reproduces fuse_masked_logits([stuff[c], background]) exactly.
    if background is None:
        return sigmoid(stuff) * stuff
    return (sigmoid(stuff) + sigmoid(background)) * (stuff + background)


def _intermediate_argmax(stacks: Sequence[FusedLogitStack], height: int,
                         width: int) -> tuple[np.ndarray, np.ndarray]:
    """Argmax over the channel-concatenation of ``stacks``, lowest index on ties.

    Box-cropped stacks are zero outside their box; only their first channel
    can win there, and only where the running best is still negative.
    """
    best = np.full((height, width), -np.inf, np.float32)
    arg = np.full((height, width), -1, np.int32)
    offset = 0
    negative_region: Optional[BBox] = None  # bounds every pixel whose best may be < 0
    for st in stacks:
        if st.box is None:
            upd = np.empty((height, width), bool)
            for j in range(st.n_channels):
                np.greater(st.logits[j], best, out=upd)
                np.copyto(best, st.logits[j], where=upd)
                np.copyto(arg, offset + j, where=upd)
            negative_region = BBox(0, 0, width, height)
        else:
            box = st.box
            if negative_region is None and offset == 0:
                best[:] = 0.0
                arg[:] = offset
                best[box.slices] = -np.inf
                arg[box.slices] = -1
            elif negative_region is not None:
                r = negative_region
                sub_best = best[r.slices]
                upd = sub_best < 0
                iy0, iy1 = max(box.y0, r.y0), min(box.y1, r.y1)
                ix0, ix1 = max(box.x0, r.x0), min(box.x1, r.x1)
                if iy0 < iy1 and ix0 < ix1:
                    upd[iy0 - r.y0:iy1 - r.y0, ix0 - r.x0:ix1 - r.x0] = False
                sub_best[upd] = 0.0
                arg[r.slices][upd] = offset
            ys, xs = box.slices
            sub_best = best[ys, xs]
            sub_arg = arg[ys, xs]
            for j in range(st.n_channels):
                v = st.logits[j]
                upd = v > sub_best
                sub_best[upd] = v[upd]
                sub_arg[upd] = offset + j
            if negative_region is None:
                negative_region = box
            else:
                r = negative_region
                negative_region = BBox(min(r.x0, box.x0), min(r.y0, box.y0),
                                       max(r.x1, box.x1), max(r.y1, box.y1))
        offset += st.n_channels
    return arg, best


def _filter_small_stuff(semantic: np.ndarray, part: np.ndarray, instance: np.ndarray,
                        stuff_mask: np.ndarray, min_stuff: int) -> None:
    if min_stuff <= 1:
        return
    # one labeling pass; equal-valued 4-neighbours join, 0 is background
    labels = measure.label(np.where(stuff_mask, semantic, 0), background=0, connectivity=1)
    sizes = np.bincount(labels.ravel())
    small = sizes < min_stuff
    small[0] = False
    if small.any():
        drop = small[labels]
        semantic[drop] = 0
        part[drop] = 0
        instance[drop] = 0


def _assemble(instance_stacks, stuff_score, stuff_arg, catalog, config, height, width) -> LabelMap:
    """Canvas from instance stacks and the best fused stuff score per pixel.

    Stuff channels come last in the channel order, so stuff wins a pixel
    exactly when its best score is strictly above every instance score.
    """
    for st in instance_stacks:
        if tuple(st.image_shape) != (height, width):
            raise ValueError(f"fused stack covers {tuple(st.image_shape)}, expected {(height, width)}")
    stuff_ids = np.array([c.class_id for c in catalog.stuff_classes], np.int64)
    fill = stuff_ids[stuff_arg] if len(stuff_ids) else np.zeros((height, width), np.int64)
    semantic = fill.astype(np.uint16)
    part = np.zeros((height, width), np.uint16)
    instance = np.zeros((height, width), np.uint16)
    thing_win = np.zeros((height, width), bool)
    if instance_stacks:
        legend = np.array([e for st in instance_stacks for e in st.legend], dtype=np.int64).reshape(-1, 3)
        legend_is_thing = catalog.lookup_tables()["is_thing"][legend[:, 0]]
        arg, best = _intermediate_argmax(instance_stacks, height, width)
        thing_win = (arg >= 0) & ~(stuff_score > best)
        thing_win &= legend_is_thing[np.maximum(arg, 0)]
        winners = legend[arg[thing_win]]
        semantic[thing_win] = winners[:, 0]
        part[thing_win] = winners[:, 1]
        instance[thing_win] = winners[:, 2]
    _filter_small_stuff(semantic, part, instance, ~thing_win, config.min_stuff_for(height, width))
    return LabelMap(np.stack([semantic, part, instance]))


def _stuff_fill(stuff_sem: np.ndarray, height: int, width: int):
    if stuff_sem.shape[0] == 0:
        return np.full((height, width), -np.inf, np.float32), np.zeros((height, width), np.intp)
    return max_argmax_channels(stuff_sem)


def assemble_canvas(instance_stacks: Sequence[FusedLogitStack], stuff_stack: FusedLogitStack,
                    sem: np.ndarray, catalog: ClassCatalog,
                    config: FusionConfig = FusionConfig()) -> LabelMap:
    """Turn fused stacks into the final (s, p, id) label map.

    Things come from the argmax over all fused channels; every other pixel
    takes the semantic head's best stuff class, and stuff regions
    (4-connected, per class) smaller than ``min_stuff`` become void.
    """
    sem = np.asarray(sem, np.float32)
    if sem.ndim != 3 or sem.shape[0] != catalog.n_classes:
        raise ValueError(f"semantic logits must be [{catalog.n_classes}, H, W], got {sem.shape}")
    channels, _ = _stuff_legend(catalog)
    height, width = sem.shape[1:]
    if tuple(stuff_stack.image_shape) != (height, width) or stuff_stack.box is not None:
        raise ValueError("the stuff stack must be dense and cover the image")
    _, stuff_arg = _stuff_fill(sem[channels], height, width)
    stuff_score = stuff_stack.logits.max(axis=0) if stuff_stack.n_channels else np.full(
        (height, width), -np.inf, np.float32)
    return _assemble(list(instance_stacks), stuff_score, stuff_arg, catalog, config, height, width)


def _stuff_score(stuff_sem, stuff_best, parts: Optional[_Head], kept, backgrounds,
                 normalized, height, width):
    """Best fused stuff score per pixel, as far as the canvas needs it."""
    if not normalized:
        background = None if parts is None else parts.take(BACKGROUND_CHANNEL)
        return _fuse_stuff_values(stuff_sem, background).max(axis=0)
    # Normalized values are >= 0, where the fused score is non-decreasing in
    # the semantic value (also after float rounding), so the best semantic
    # channel carries the best score.
    if parts is None:
        return _fuse_stuff_values(stuff_best, None)
    # Outside every box all instance scores are exactly 0. There the stuff
    # score (>= s + b) only needs its sign, which is positive unless the best
    # stuff probability and the part background both underflowed to 0.
    score = np.full((height, width), np.inf, np.float32)
    need = stuff_best == 0
    for det, background in zip(kept, backgrounds):
        ys, xs = det.box.slices
        score[ys, xs] = _fuse_stuff_values(stuff_best[ys, xs], background)
        need[ys, xs] = False
    index = np.flatnonzero(need)
    if index.size:
        background = parts.take_pixels(BACKGROUND_CHANNEL, index)
        score.ravel()[index] = _fuse_stuff_values(stuff_best.ravel()[index], background)
    return score


def _map(fn, items, n_jobs: int):
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def _run(sem_logits, part_logits, dets, catalog, config, n_jobs) -> LabelMap:
    sem_logits, part_logits = check_heads(sem_logits, part_logits, catalog)
    height, width = sem_logits.shape[1:]
    dets = check_detections_for(dets, catalog, height, width)

    normalize = config.normalize_heads
    sem = _Head(sem_logits, normalize)
    parts = None if part_logits is None else _Head(part_logits, normalize, eager=False)
    kept = filter_detections(dets, config)
    fused = _map(lambda d: _fuse_instance(d, sem, parts, catalog, (height, width)), kept, n_jobs)
    instance_stacks = [st for st, _ in fused]

    channels, _ = _stuff_legend(catalog)
    stuff_sem = sem.take(channels)
    stuff_best, stuff_arg = _stuff_fill(stuff_sem, height, width)
    if instance_stacks and len(channels):
        stuff_score = _stuff_score(stuff_sem, stuff_best, parts, kept, [bg for _, bg in fused],
                                   normalize, height, width)
    else:
        stuff_score = stuff_best  # unused: either nothing competes with stuff or no stuff exists
    return _assemble(instance_stacks, stuff_score, stuff_arg, catalog, config, height, width)


def jppf(sem_logits: np.ndarray, part_logits: np.ndarray, dets: Sequence[Detection],
         catalog: ClassCatalog, config: FusionConfig = FusionConfig(), n_jobs: int = 1) -> LabelMap:
    """Joint panoptic-part fusion of the three head outputs.

    Parameters
    ----------
    sem_logits : ndarray of shape (N, H, W)
        Semantic head logits, one channel per catalog class in catalog order.
    part_logits : ndarray of shape (N_P, H, W)
        Part head logits; channel 0 is the shared background.
    dets : sequence of Detection
        Raw instance head proposals; filtered here.
    n_jobs : int
        Worker threads for per-instance fusion. Output does not depend on it.
    """
    if part_logits is None:
        raise ValueError("jppf needs part logits; use panoptic_fuse_two without a part head")
    return _run(sem_logits, part_logits, dets, catalog, config, n_jobs)


def panoptic_fuse_two(sem_logits: np.ndarray, dets: Sequence[Detection], catalog: ClassCatalog,
                      config: FusionConfig = FusionConfig(), n_jobs: int = 1) -> LabelMap:
    """Panoptic fusion without a part head (semantic and instance logits only).

    The part plane of the result is 0 everywhere.
    """
    return _run(sem_logits, None, dets, catalog, config, n_jobs)
