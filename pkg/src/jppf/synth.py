"""Synthetic panoptic-part scenes and a per-pixel reference fusion.

Scenes are drawn with numpy's PCG64 generator (``numpy.random.default_rng``)
in a fixed order: stuff layout, instance placement, shapes, scores, semantic
noise, part noise, then per-detection box jitter and mask noise. The same
seed therefore always gives bit-identical outputs.

Head logits are one-hot with a margin (default 4.0) on the true channel plus
Gaussian noise. Each instance becomes one detection whose mask logits are
``+margin`` on the object and ``-margin`` elsewhere in its box, plus noise.
"""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .config import FusionConfig
from .detections import Detection
from .labelmap import LabelMap
from .taxonomy import BACKGROUND_CHANNEL, THING, ClassCatalog, load_catalog, part_channels_for_class
from .tensors import BBox


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    n_instances: tuple[int, int] = (2, 5)
    catalog: str = "cpp"
    logit_noise_sigma: float = 0.0
    score_range: tuple[float, float] = (0.6, 1.0)
    bbox_jitter: int = 0
    seed: int = 0
    margin: float = 4.0
    # instance side lengths as a fraction of min(height, width)
    size_range: tuple[float, float] = (0.15, 0.35)
    n_stuff_bands: tuple[int, int] = (2, 4)
    max_attempts: int = 500

    def __post_init__(self):
        if self.width * self.height < 1 or self.width < 1 or self.height < 1:
            raise ValueError("scene must have at least one pixel")
        if self.logit_noise_sigma < 0 or self.bbox_jitter < 0:
            raise ValueError("noise parameters must be non-negative")
        lo, hi = self.score_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"score_range {self.score_range} must lie in [0, 1]")
        if not 0 <= self.n_instances[0] <= self.n_instances[1]:
            raise ValueError(f"bad instance count range {self.n_instances}")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


class Scene(NamedTuple):
    gt: LabelMap
    sem: np.ndarray
    parts: np.ndarray
    dets: list


def _stuff_layout(rng, catalog: ClassCatalog, height: int, width: int, bands: tuple[int, int]) -> np.ndarray:
    stuff = [c.class_id for c in catalog.stuff_classes]
    if not stuff:
        raise SceneGenerationError("catalog has no stuff classes for the background")
    n = int(rng.integers(bands[0], bands[1] + 1))
    n = max(1, min(n, height))
    cuts = np.sort(rng.choice(np.arange(1, height), size=n - 1, replace=False)) if n > 1 else np.array([], int)
    classes = rng.choice(stuff, size=n, replace=len(stuff) < n)
    semantic = np.zeros((height, width), np.int64)
    edges = [0, *cuts.tolist(), height]
    for cls, y0, y1 in zip(classes, edges[:-1], edges[1:]):
        semantic[y0:y1] = cls
    return semantic


def _shape_mask(kind: str, h: int, w: int) -> np.ndarray:
    if kind == "rect":
        return np.ones((h, w), bool)
    yy, xx = np.mgrid[0:h, 0:w]
    ry, rx = h / 2.0, w / 2.0
    return ((xx + 0.5 - rx) / rx) ** 2 + ((yy + 0.5 - ry) / ry) ** 2 <= 1.0


def generate_scene(cfg: SceneConfig = SceneConfig()) -> Scene:
    """Ground truth, semantic logits, part logits and detections for one scene."""
    catalog = load_catalog(cfg.catalog)
    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.height, cfg.width
    semantic = _stuff_layout(rng, catalog, H, W, cfg.n_stuff_bands)
    part = np.zeros((H, W), np.int64)
    instance = np.zeros((H, W), np.int64)

    things = [c for c in catalog.classes if c.kind == THING]
    n_inst = int(rng.integers(cfg.n_instances[0], cfg.n_instances[1] + 1))
    if n_inst and not things:
        raise SceneGenerationError("catalog has no thing classes")
    short = min(H, W)
    placed = []  # (class def, box, shape mask)
    occupied = np.zeros((H, W), bool)
    for _ in range(n_inst):
        cdef = things[int(rng.integers(len(things)))]
        n_parts = max(1, len(cdef.part_channel_ids))
        min_side = max(3, 2 * n_parts)
        for _attempt in range(cfg.max_attempts):
            lo = max(min_side, int(cfg.size_range[0] * short))
            hi = max(lo, int(cfg.size_range[1] * short))
            h = int(rng.integers(lo, hi + 1))
            w = int(rng.integers(max(3, lo // 2), hi + 1))
            if h > H or w > W:
                continue
            y0 = int(rng.integers(0, H - h + 1))
            x0 = int(rng.integers(0, W - w + 1))
            if occupied[y0:y0 + h, x0:x0 + w].any():
                continue
            occupied[y0:y0 + h, x0:x0 + w] = True
            kind = ("rect", "ellipse")[int(rng.integers(2))]
            placed.append((cdef, BBox(x0, y0, x0 + w, y0 + h), _shape_mask(kind, h, w)))
            break
        else:
            raise SceneGenerationError(
                f"could not place {n_inst} instances in a {H}x{W} image after {cfg.max_attempts} attempts")

    scores = rng.uniform(cfg.score_range[0], cfg.score_range[1], size=len(placed))
    order = np.argsort(-scores, kind="stable")
    dets = []
    gt_boxes = []
    for new_id, idx in enumerate(order, start=1):
        cdef, box, shape = placed[idx]
        ys, xs = box.slices
        region = np.zeros((H, W), bool)
        region[ys, xs] = shape
        semantic[region] = cdef.class_id
        instance[region] = new_id
        channels = part_channels_for_class(catalog, cdef.class_id)
        if cdef.is_partitionable:
            rows = np.arange(box.height)
            strip = (rows * len(channels)) // box.height
            part_box = np.asarray(channels)[strip][:, None].repeat(box.width, axis=1)
            part[ys, xs] = np.where(shape, part_box, part[ys, xs])
        gt_boxes.append((cdef.class_id, float(scores[idx]), box, region))

    sem = _noisy_onehot(rng, semantic, catalog, cfg)
    parts = _noisy_part_onehot(rng, part, catalog, cfg)

    for class_id, score, box, region in gt_boxes:
        j = cfg.bbox_jitter
        if j:
            dx0, dy0, dx1, dy1 = (int(v) for v in rng.integers(-j, j + 1, size=4))
        else:
            dx0 = dy0 = dx1 = dy1 = 0
        x0 = min(max(box.x0 + dx0, 0), W - 1)
        y0 = min(max(box.y0 + dy0, 0), H - 1)
        x1 = max(min(box.x1 + dx1, W), x0 + 1)
        y1 = max(min(box.y1 + dy1, H), y0 + 1)
        jbox = BBox(x0, y0, x1, y1)
        inside = region[jbox.slices]
        mask = np.where(inside, cfg.margin, -cfg.margin).astype(np.float32)
        if cfg.logit_noise_sigma > 0:
            mask += rng.normal(0.0, cfg.logit_noise_sigma, size=mask.shape).astype(np.float32)
        dets.append(Detection(class_id, score, jbox, mask))

    gt = LabelMap.from_planes(semantic, part, instance)
    return Scene(gt, sem, parts, dets)


def _noisy_onehot(rng, semantic, catalog, cfg) -> np.ndarray:
    H, W = semantic.shape
    index = np.zeros(max(catalog.class_ids) + 1, np.int64)
    for i, cid in enumerate(catalog.class_ids):
        index[cid] = i
    sem = np.zeros((catalog.n_classes, H, W), np.float32)
    np.put_along_axis(sem, index[semantic][None], np.float32(cfg.margin), axis=0)
    if cfg.logit_noise_sigma > 0:
        sem += rng.normal(0.0, cfg.logit_noise_sigma, size=sem.shape).astype(np.float32)
    return sem


def _noisy_part_onehot(rng, part, catalog, cfg) -> np.ndarray:
    H, W = part.shape
    parts = np.zeros((catalog.n_part_channels, H, W), np.float32)
    np.put_along_axis(parts, part[None], np.float32(cfg.margin), axis=0)
    if cfg.logit_noise_sigma > 0:
        parts += rng.normal(0.0, cfg.logit_noise_sigma, size=parts.shape).astype(np.float32)
    return parts


# ---------------------------------------------------------------------------
# Reference fusion: scalar float32 arithmetic, one pixel at a time.

_F0 = np.float32(0.0)
_F1 = np.float32(1.0)


def _sig(v):
    with np.errstate(over="ignore"):
        return _F1 / (_F1 + np.exp(-v))


def _fuse_scalars(values):
    # canonical ascending order, matching the engine's order-free summation
    if len(values) == 1:
        v = values[0]
        return _sig(v) * v
    if len(values) > 2:
        values = sorted(values)
    total = values[0]
    total_sig = _sig(values[0])
    for v in values[1:]:
        total = total + v
        total_sig = total_sig + _sig(v)
    return total_sig * total


def _softmax_pixelwise(t: np.ndarray) -> np.ndarray:
    C, H, W = t.shape
    out = np.zeros((C, H, W), np.float32)
    for y in range(H):
        for x in range(W):
            vals = [t[c, y, x] for c in range(C)]
            m = vals[0]
            for v in vals[1:]:
                if v > m:
                    m = v
            exps = [np.exp(v - m) for v in vals]
            denom = exps[0]
            for e in exps[1:]:
                denom = denom + e
            for c in range(C):
                out[c, y, x] = exps[c] / denom
    return out


def _naive_filter(dets, config):
    cands = [d for d in dets if d.score >= config.confidence_threshold]
    cands = sorted(cands, key=lambda d: -d.score)
    covered = set()
    kept = []
    for d in cands:
        pixels = set()
        for y in range(d.box.y0, d.box.y1):
            for x in range(d.box.x0, d.box.x1):
                if d.mask_logits[y - d.box.y0, x - d.box.x0] > 0:
                    pixels.add((y, x))
        if pixels and len(pixels & covered) / len(pixels) > config.overlap_threshold:
            continue
        covered |= pixels
        kept.append((d, len(kept) + 1))
    return kept


def naive_fusion_oracle(sem: np.ndarray, parts: Optional[np.ndarray], dets: Sequence[Detection],
                        catalog: ClassCatalog, config: FusionConfig = FusionConfig()) -> LabelMap:
    """Per-pixel transcription of the joint fusion; ``parts=None`` gives the
    two-head panoptic fusion. Slow by design; use on small images only."""
    sem = np.asarray(sem, np.float32)
    _, H, W = sem.shape
    if config.normalize_heads:
        sem = _softmax_pixelwise(sem)
        if parts is not None:
            parts = _softmax_pixelwise(np.asarray(parts, np.float32))
    elif parts is not None:
        parts = np.asarray(parts, np.float32)

    kept = _naive_filter(dets, config)
    channels = []  # (det or None, sem channel, part channel or None, legend)
    for d, inst_id in kept:
        sc = catalog.channel_of(d.class_id)
        if parts is None:
            channels.append((d, sc, None, (d.class_id, 0, inst_id)))
        else:
            for p in part_channels_for_class(catalog, d.class_id):
                channels.append((d, sc, p, (d.class_id, p, inst_id)))
    stuff_channels = [catalog.channel_of(c.class_id) for c in catalog.stuff_classes]
    stuff_ids = [c.class_id for c in catalog.stuff_classes]
    for sc, cid in zip(stuff_channels, stuff_ids):
        channels.append((None, sc, BACKGROUND_CHANNEL if parts is not None else None, (cid, 0, 0)))

    out = np.zeros((3, H, W), np.int64)
    is_stuff_pixel = np.zeros((H, W), bool)
    for y in range(H):
        for x in range(W):
            best, best_legend = None, None
            for d, sc, pc, legend in channels:
                if d is not None:
                    inside = d.box.contains(y, x)
                    mls = sem[sc, y, x] if inside else _F0
                    mli = d.mask_logits[y - d.box.y0, x - d.box.x0] if inside else _F0
                    mll = [mls, mli]
                    if pc is not None:
                        mll.append(parts[pc, y, x] if inside else _F0)
                else:
                    mll = [sem[sc, y, x]]
                    if pc is not None:
                        mll.append(parts[pc, y, x])
                value = _fuse_scalars(mll)
                if best is None or value > best:
                    best, best_legend = value, legend
            if best_legend is not None and catalog.get(best_legend[0]).kind == THING:
                out[:, y, x] = best_legend
            else:
                top, top_id = None, 0
                for sc, cid in zip(stuff_channels, stuff_ids):
                    if top is None or sem[sc, y, x] > top:
                        top, top_id = sem[sc, y, x], cid
                out[:, y, x] = (top_id, 0, 0)
                is_stuff_pixel[y, x] = True

    min_stuff = config.min_stuff_for(H, W)
    seen = np.zeros((H, W), bool)
    for y in range(H):
        for x in range(W):
            if not is_stuff_pixel[y, x] or seen[y, x]:
                continue
            cls = out[0, y, x]
            region = []
            queue = deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                region.append((cy, cx))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if (0 <= ny < H and 0 <= nx < W and not seen[ny, nx]
                            and is_stuff_pixel[ny, nx] and out[0, ny, nx] == cls):
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            if len(region) < min_stuff:
                for cy, cx in region:
                    out[:, cy, cx] = 0
    return LabelMap(out.astype(np.uint16))
