"""Segmentation quality metrics for panoptic-part label maps.

PQ follows the usual definition: segments of the same class match when their
IoU exceeds 0.5, ``PQ = sum(IoU of TP) / (TP + FP/2 + FN/2)``, and ground
truth void is removed from IoU denominators. Thing segments are (class,
instance) groups; stuff segments are whole-class pixel sets.

PartPQ replaces the IoU of a matched partitionable segment by the mean
part-level IoU computed inside the union of the two matched segments. Parts
absent from both are skipped, and ground-truth pixels of the segment without
a part label of that class are ignored. Non-partitionable classes, and
matched segments where no part remains to compare, contribute their plain
segment IoU.

Classes with neither ground-truth nor predicted segments are left out of all
class averages.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from ._validation import check_same_shape
from .detections import Detection
from .labelmap import LabelMap
from .taxonomy import ClassCatalog
from .tensors import ShapeError

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
_ID_BITS = 16


class IoUResult(NamedTuple):
    per_class: np.ndarray  # NaN where the class is excluded
    mean: float


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_index: Optional[int] = None) -> np.ndarray:
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    keep = (gt >= 0) & (gt < num_classes) & (pred >= 0) & (pred < num_classes)
    if ignore_index is not None:
        keep &= gt != ignore_index
    codes = gt[keep] * num_classes + pred[keep]
    return np.bincount(codes, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray, ignore_index: Optional[int] = None) -> IoUResult:
    cm = cm.astype(np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        ious = np.where(union > 0, inter / union, np.nan)
    if ignore_index is not None and 0 <= ignore_index < len(ious):
        ious[ignore_index] = np.nan
    valid = ~np.isnan(ious)
    return IoUResult(ious, float(ious[valid].mean()) if valid.any() else float("nan"))


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int,
         ignore_index: Optional[int] = None) -> IoUResult:
    """Confusion-matrix IoU per class and its mean.

    Pixels whose ground truth equals ``ignore_index`` are skipped, and that
    label never counts as a class. Classes absent from both maps get NaN and
    are left out of the mean.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_index), ignore_index)


def density(pred: LabelMap) -> float:
    """Fraction of non-void pixels."""
    return float(np.count_nonzero(pred.semantic)) / pred.semantic.size


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0
    part_iou_sum: float = 0.0

    @property
    def denominator(self) -> float:
        return self.tp + 0.5 * self.fp + 0.5 * self.fn

    @property
    def pq(self) -> float:
        return self.iou_sum / self.denominator if self.denominator else 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        return self.tp / self.denominator if self.denominator else 0.0

    @property
    def part_pq(self) -> float:
        return self.part_iou_sum / self.denominator if self.denominator else 0.0

    @property
    def present(self) -> bool:
        return (self.tp + self.fp + self.fn) > 0


class PQResult(NamedTuple):
    pq: float
    sq: float
    rq: float
    per_class: dict


class PartPQResult(NamedTuple):
    all: float
    p: float
    np: float
    per_class: dict


def _segment_codes(lm: LabelMap) -> np.ndarray:
    codes = (lm.semantic.astype(np.int64) << _ID_BITS) | lm.instance.astype(np.int64)
    codes[lm.semantic == 0] = -1
    return codes


def _counts(codes: np.ndarray) -> dict[int, int]:
    values, counts = np.unique(codes, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts) if v >= 0}


def _part_iou(pred: LabelMap, gt: LabelMap, pred_seg: np.ndarray, gt_seg: np.ndarray,
              gt_valid: np.ndarray, channels: Sequence[int]) -> Optional[float]:
    region = (pred_seg | gt_seg) & gt_valid
    labelled = np.isin(gt.part, channels)
    region &= ~(gt_seg & ~labelled)
    gt_part = np.where(gt_seg & region, gt.part, -1)
    pred_part = np.where(pred_seg & region, pred.part, -1)
    ious = []
    for k in channels:
        g, p = gt_part == k, pred_part == k
        union = np.count_nonzero(g | p)
        if union:
            ious.append(np.count_nonzero(g & p) / union)
    return float(np.mean(ious)) if ious else None


def match_segments(pred: LabelMap, gt: LabelMap, catalog: ClassCatalog) -> dict[int, ClassStats]:
    """Per-class TP/FP/FN, IoU sums and part-IoU sums for one image."""
    check_same_shape(pred, gt)
    gt_codes = _segment_codes(gt)
    pred_codes = _segment_codes(pred)
    gt_valid = gt_codes >= 0

    gt_areas = _counts(gt_codes)
    pred_areas = _counts(pred_codes)
    pred_on_void = _counts(np.where(gt_valid, -1, pred_codes))
    both = gt_valid & (pred_codes >= 0)
    pair_codes, pair_counts = np.unique(
        np.stack([gt_codes[both], pred_codes[both]]), axis=1, return_counts=True)

    stats: dict[int, ClassStats] = defaultdict(ClassStats)
    matched_gt, matched_pred = set(), set()
    for (g, p), inter in zip(pair_codes.T.tolist(), pair_counts.tolist()):
        if g >> _ID_BITS != p >> _ID_BITS:
            continue
        union = pred_areas[p] + gt_areas[g] - inter - pred_on_void.get(p, 0)
        iou = inter / union
        if iou <= 0.5:
            continue
        cls = g >> _ID_BITS
        matched_gt.add(g)
        matched_pred.add(p)
        st = stats[cls]
        st.tp += 1
        st.iou_sum += iou
        part_iou = None
        if cls in catalog and catalog.get(cls).is_partitionable:
            part_iou = _part_iou(pred, gt, pred_codes == p, gt_codes == g, gt_valid,
                                 catalog.get(cls).part_channel_ids)
        # no part labelled on either side: nothing to grade but the segment
        st.part_iou_sum += iou if part_iou is None else part_iou
    for g in gt_areas:
        if g not in matched_gt:
            stats[g >> _ID_BITS].fn += 1
    for p in pred_areas:
        if p not in matched_pred:
            stats[p >> _ID_BITS].fp += 1
    return dict(stats)


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else float("nan")


def summarize_pq(stats: dict[int, ClassStats]) -> PQResult:
    present = {c: s for c, s in stats.items() if s.present}
    return PQResult(_mean(s.pq for s in present.values()),
                    _mean(s.sq for s in present.values()),
                    _mean(s.rq for s in present.values()),
                    present)


def summarize_part_pq(stats: dict[int, ClassStats], catalog: ClassCatalog) -> PartPQResult:
    present = {c: s for c, s in stats.items() if s.present}

    def partitionable(c):
        return c in catalog and catalog.get(c).is_partitionable

    return PartPQResult(_mean(s.part_pq for s in present.values()),
                        _mean(s.part_pq for c, s in present.items() if partitionable(c)),
                        _mean(s.part_pq for c, s in present.items() if not partitionable(c)),
                        present)


def pq(pred: LabelMap, gt: LabelMap, catalog: ClassCatalog) -> PQResult:
    return summarize_pq(match_segments(pred, gt, catalog))


def part_pq(pred: LabelMap, gt: LabelMap, catalog: ClassCatalog) -> PartPQResult:
    return summarize_part_pq(match_segments(pred, gt, catalog), catalog)


def gt_instances_from_labelmap(gt: LabelMap, catalog: ClassCatalog) -> list[tuple[int, np.ndarray]]:
    """(class id, full-image mask) for every thing segment with an instance id."""
    tables = catalog.lookup_tables()
    out = []
    codes = _segment_codes(gt)
    for code in sorted(_counts(codes)):
        cls, inst = code >> _ID_BITS, code & ((1 << _ID_BITS) - 1)
        if inst and cls < len(tables["is_thing"]) and tables["is_thing"][cls]:
            out.append((cls, codes == code))
    return out


def _average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return float("nan")
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


class APAccumulator:
    """Score-ranked greedy mask matching accumulated over images."""

    def __init__(self, iou_thresholds: Sequence[float] = (0.5,)):
        self.iou_thresholds = tuple(float(t) for t in iou_thresholds)
        self._scores = defaultdict(list)
        self._flags = defaultdict(lambda: [[] for _ in self.iou_thresholds])
        self._n_gt = defaultdict(int)

    def add(self, dets: Sequence[Detection], gt_instances: Sequence[tuple[int, np.ndarray]],
            image_shape: Optional[tuple[int, int]] = None) -> None:
        if image_shape is None:
            if not gt_instances:
                raise ValueError("image_shape is required when there are no ground-truth instances")
            image_shape = np.asarray(gt_instances[0][1]).shape
        gt_by_class = defaultdict(list)
        for cls, mask in gt_instances:
            gt_by_class[int(cls)].append(np.asarray(mask, bool))
            self._n_gt[int(cls)] += 1
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        used = {(c, t): set() for c in gt_by_class for t in range(len(self.iou_thresholds))}
        for i in order:
            d = dets[i]
            gts = gt_by_class.get(d.class_id, [])
            mask = d.full_mask(*image_shape)
            area = mask.sum()
            ious = [np.count_nonzero(mask & g) / max(np.count_nonzero(mask | g), 1) for g in gts]
            self._scores[d.class_id].append(d.score)
            for t, thr in enumerate(self.iou_thresholds):
                best, best_iou = -1, -1.0
                for j, iou in enumerate(ious):
                    if j in used[(d.class_id, t)] or iou < thr or iou <= best_iou:
                        continue
                    best, best_iou = j, iou
                hit = best >= 0 and area > 0
                if hit:
                    used[(d.class_id, t)].add(best)
                self._flags[d.class_id][t].append(hit)

    def per_class(self) -> dict[int, float]:
        out = {}
        for cls, n_gt in self._n_gt.items():
            if n_gt == 0:
                continue
            scores = np.asarray(self._scores.get(cls, []), np.float64)
            order = np.argsort(-scores, kind="stable")
            aps = []
            for t in range(len(self.iou_thresholds)):
                flags = np.asarray(self._flags[cls][t], bool)[order] if len(scores) else np.zeros(0, bool)
                aps.append(_average_precision(flags, n_gt))
            out[cls] = float(np.mean(aps))
        return out

    def mean(self) -> float:
        return _mean(self.per_class().values())


class APResult(NamedTuple):
    per_class: dict
    mean: float


def mask_ap(dets: Sequence[Detection], gt_instances: Sequence[tuple[int, np.ndarray]],
            iou_threshold: float | Sequence[float] = 0.5,
            image_shape: Optional[tuple[int, int]] = None) -> APResult:
    """Per-class mask AP with all-point interpolation.

    Pass a sequence of thresholds (e.g. ``COCO_IOU_THRESHOLDS``) to average
    over them. Classes without ground truth are skipped.
    """
    thresholds = (iou_threshold,) if np.isscalar(iou_threshold) else tuple(iou_threshold)
    acc = APAccumulator(thresholds)
    if gt_instances or image_shape is not None:
        acc.add(dets, gt_instances, image_shape)
    per_class = acc.per_class()
    return APResult(per_class, _mean(per_class.values()))


REPORT_COLUMNS = (
    ("sem_miou", "Sem. mIoU"),
    ("inst_ap", "Inst. AP"),
    ("part_miou", "Part mIoU"),
    ("partpq_all", "PartPQ All"),
    ("partpq_p", "PartPQ P"),
    ("partpq_np", "PartPQ NP"),
    ("density", "Density"),
)


@dataclass
class EvalReport:
    sem_miou: float = float("nan")
    inst_ap: float = float("nan")
    part_miou: float = float("nan")
    partpq_all: float = float("nan")
    partpq_p: float = float("nan")
    partpq_np: float = float("nan")
    density: float = float("nan")
    pq: float = float("nan")
    sq: float = float("nan")
    rq: float = float("nan")
    n_images: int = 0
    per_class: dict = field(default_factory=dict)

    def to_kv(self) -> str:
        keys = [k for k, _ in REPORT_COLUMNS] + ["pq", "sq", "rq", "n_images"]
        lines = [f"{k} = {getattr(self, k)!r}" for k in keys]
        for cls, st in sorted(self.per_class.items()):
            lines.append(f"class.{cls} = tp:{st.tp} fp:{st.fp} fn:{st.fn} "
                         f"pq:{st.pq!r} sq:{st.sq!r} rq:{st.rq!r} partpq:{st.part_pq!r}")
        return "\n".join(lines) + "\n"

    def to_text(self, catalog: Optional[ClassCatalog] = None) -> str:
        def pct(v):
            return "   n/a" if v is None or math.isnan(v) else f"{100 * v:6.2f}"

        head = " | ".join(f"{title:>10}" for _, title in REPORT_COLUMNS)
        row = " | ".join(f"{pct(getattr(self, k)):>10}" for k, _ in REPORT_COLUMNS)
        lines = [head, "-" * len(head), row, "",
                 f"PQ {pct(self.pq)}  SQ {pct(self.sq)}  RQ {pct(self.rq)}  images {self.n_images}", "",
                 f"{'class':<18} {'TP':>4} {'FP':>4} {'FN':>4} {'PQ':>7} {'PartPQ':>7}"]
        for cls, st in sorted(self.per_class.items()):
            name = catalog.get(cls).name if catalog is not None and cls in catalog else str(cls)
            lines.append(f"{name:<18} {st.tp:>4} {st.fp:>4} {st.fn:>4} {pct(st.pq):>7} {pct(st.part_pq):>7}")
        return "\n".join(lines) + "\n"


class PanopticPartEvaluator:
    """Accumulates every metric over a set of images.

    Head outputs are optional; their columns stay NaN when never provided.
    """

    def __init__(self, catalog: ClassCatalog, ap_thresholds: Sequence[float] = (0.5,)):
        self.catalog = catalog
        self.stats: dict[int, ClassStats] = defaultdict(ClassStats)
        size = max(catalog.class_ids, default=0) + 1
        self._sem_cm = np.zeros((size, size), np.int64)
        self._part_cm = np.zeros((catalog.n_part_channels,) * 2, np.int64)
        self._ap = APAccumulator(ap_thresholds)
        self._densities = []
        self._seen_sem = self._seen_part = self._seen_dets = False

    def update(self, pred: LabelMap, gt: LabelMap, sem_logits=None, part_logits=None,
               dets: Optional[Iterable[Detection]] = None) -> None:
        for cls, st in match_segments(pred, gt, self.catalog).items():
            acc = self.stats[cls]
            acc.tp += st.tp
            acc.fp += st.fp
            acc.fn += st.fn
            acc.iou_sum += st.iou_sum
            acc.part_iou_sum += st.part_iou_sum
        self._densities.append(density(pred))
        if sem_logits is not None:
            ids = np.asarray(self.catalog.class_ids)[np.argmax(sem_logits, axis=0)]
            self._sem_cm += confusion_matrix(ids, gt.semantic, len(self._sem_cm), ignore_index=0)
            self._seen_sem = True
        if part_logits is not None:
            part_pred = np.argmax(part_logits, axis=0)
            labelled = gt.semantic != 0
            self._part_cm += confusion_matrix(part_pred[labelled], gt.part[labelled], len(self._part_cm))
            self._seen_part = True
        if dets is not None:
            self._ap.add(list(dets), gt_instances_from_labelmap(gt, self.catalog), gt.shape)
            self._seen_dets = True

    def report(self) -> EvalReport:
        pq_res = summarize_pq(self.stats)
        ppq = summarize_part_pq(self.stats, self.catalog)
        nan = float("nan")
        return EvalReport(
            sem_miou=iou_from_confusion(self._sem_cm, 0).mean if self._seen_sem else nan,
            inst_ap=self._ap.mean() if self._seen_dets else nan,
            part_miou=iou_from_confusion(self._part_cm).mean if self._seen_part else nan,
            partpq_all=ppq.all, partpq_p=ppq.p, partpq_np=ppq.np,
            density=_mean(self._densities),
            pq=pq_res.pq, sq=pq_res.sq, rq=pq_res.rq,
            n_images=len(self._densities),
            per_class=pq_res.per_class,
        )


def evaluate(pred: LabelMap, gt: LabelMap, catalog: ClassCatalog, sem_logits=None,
             part_logits=None, dets=None) -> EvalReport:
    ev = PanopticPartEvaluator(catalog)
    ev.update(pred, gt, sem_logits, part_logits, dets)
    return ev.report()
