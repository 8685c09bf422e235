from collections import defaultdict
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from jppf.detections import Detection
from jppf.fusion import jppf
from jppf.labelmap import LabelMap
from jppf.metrics import (
    COCO_IOU_THRESHOLDS, PanopticPartEvaluator, density, evaluate, mask_ap, match_segments, miou,
    part_pq, pq,
)
from jppf.synth import SceneConfig, generate_scene
from jppf.taxonomy import preset_catalog
from jppf.tensors import BBox

CPP = preset_catalog("cpp")
ROAD = CPP.by_name("road").class_id
SKY = CPP.by_name("sky").class_id
PERSON = CPP.by_name("person").class_id
TRAIN = CPP.by_name("train").class_id
HEAD, TORSO = CPP.by_name("person").part_channel_ids[:2]


def _row(sem, part, inst):
    return LabelMap.from_planes([sem], [part], [inst])


# -- independent pixel-set reference --------------------------------------------

def naive_stats(pred, gt, catalog):
    """Per-class (tp, fp, fn, iou_sum, part_iou_sum) from explicit pixel sets."""
    def segments(lm):
        segs = defaultdict(set)
        for y in range(lm.height):
            for x in range(lm.width):
                s, _, i = lm[y, x]
                if s:
                    segs[(s, i)].add((y, x))
        return segs

    gt_void = {(y, x) for y in range(gt.height) for x in range(gt.width) if gt[y, x][0] == 0}
    gsegs, psegs = segments(gt), segments(pred)
    out = defaultdict(lambda: [0, 0, 0, 0.0, 0.0])
    mg, mp = set(), set()
    for gk, g in gsegs.items():
        for pk, p in psegs.items():
            if gk[0] != pk[0]:
                continue
            inter = len(g & p)
            union = len(g | (p - gt_void))
            if inter / union <= 0.5:
                continue
            iou = inter / union
            mg.add(gk)
            mp.add(pk)
            rec = out[gk[0]]
            rec[0] += 1
            rec[3] += iou
            cdef = catalog.get(gk[0])
            if cdef.is_partitionable:
                ious = []
                chans = set(cdef.part_channel_ids)
                region = {q for q in (g | p) if q not in gt_void and not (q in g and gt[q][1] not in chans)}
                for k in cdef.part_channel_ids:
                    gp = {q for q in region if q in g and gt[q][1] == k}
                    pp = {q for q in region if q in p and pred[q][1] == k}
                    if gp | pp:
                        ious.append(len(gp & pp) / len(gp | pp))
                rec[4] += sum(ious) / len(ious) if ious else iou
            else:
                rec[4] += iou
    for gk in gsegs:
        if gk not in mg:
            out[gk[0]][2] += 1
    for pk in psegs:
        if pk not in mp:
            out[pk[0]][1] += 1
    return dict(out)


small_maps = st.tuples(
    hnp.arrays(np.uint16, (6, 6), elements=st.sampled_from([0, ROAD, SKY, PERSON, TRAIN])),
    hnp.arrays(np.uint16, (6, 6), elements=st.integers(0, 3)),
    hnp.arrays(np.uint16, (6, 6), elements=st.sampled_from([0, HEAD, TORSO])),
)


def _to_labelmap(sem, inst, part):
    thing = CPP.lookup_tables()["is_thing"][sem]
    inst = np.where(thing, np.maximum(inst, 1), 0)
    part = np.where(sem == PERSON, part, 0)
    return LabelMap.from_planes(sem, part, inst)


@settings(max_examples=150, deadline=None)
@given(small_maps, small_maps)
def test_matches_pixel_set_reference(a, b):
    pred, gt = _to_labelmap(*a), _to_labelmap(*b)
    ours = match_segments(pred, gt, CPP)
    ref = naive_stats(pred, gt, CPP)
    assert set(ours) == set(ref)
    for cls, st_ in ours.items():
        tp, fp, fn, iou_sum, part_sum = ref[cls]
        assert (st_.tp, st_.fp, st_.fn) == (tp, fp, fn)
        assert st_.iou_sum == pytest.approx(iou_sum, abs=1e-12)
        assert st_.part_iou_sum == pytest.approx(part_sum, abs=1e-12)
        assert st_.pq == pytest.approx(st_.sq * st_.rq, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(small_maps, small_maps, st.permutations([1, 2, 3]))
def test_instance_relabeling_invariance(a, b, perm):
    pred, gt = _to_labelmap(*a), _to_labelmap(*b)
    lut = np.array([0, *perm], np.uint16)
    relabeled = LabelMap.from_planes(pred.semantic, pred.part, lut[pred.instance])
    np.testing.assert_equal(pq(pred, gt, CPP)[:3], pq(relabeled, gt, CPP)[:3])
    np.testing.assert_allclose(part_pq(pred, gt, CPP)[:3], part_pq(relabeled, gt, CPP)[:3])


@settings(max_examples=50, deadline=None)
@given(small_maps, small_maps)
def test_bounds_and_group_ordering(a, b):
    pred, gt = _to_labelmap(*a), _to_labelmap(*b)
    res = part_pq(pred, gt, CPP)
    for v in res[:3]:
        assert np.isnan(v) or 0.0 <= v <= 1.0
    if not (np.isnan(res.p) or np.isnan(res.np)):
        assert min(res.p, res.np) - 1e-12 <= res.all <= max(res.p, res.np) + 1e-12


# -- hand-computed cases -----------------------------------------------------------

def test_pq_hand_example():
    # gt: person 1 on 10 px, person 2 on 5 px; pred: 6 px inside person 1
    gt = _row([PERSON] * 15 + [0] * 5, [0] * 20, [1] * 10 + [2] * 5 + [0] * 5)
    pred = _row([PERSON] * 6 + [0] * 14, [0] * 20, [1] * 6 + [0] * 14)
    res = pq(pred, gt, CPP)
    assert res.pq == pytest.approx(float(Fraction(6, 10) / Fraction(3, 2)), abs=1e-15)
    assert res.pq == pytest.approx(0.4, abs=1e-15)
    assert res.sq == pytest.approx(0.6, abs=1e-15)
    assert res.rq == pytest.approx(2 / 3, abs=1e-15)


def test_pq_identity_and_pure_fp():
    gt = _row([ROAD] * 4 + [PERSON] * 4, [0] * 8, [0] * 4 + [1] * 4)
    assert pq(gt, gt, CPP)[:3] == (1.0, 1.0, 1.0)
    assert part_pq(gt, gt, CPP)[:3] == (1.0, 1.0, 1.0)
    pred = _row([SKY] * 4 + [PERSON] * 4, [0] * 8, [0] * 4 + [1] * 4)
    assert pq(pred, gt, CPP).per_class[SKY].pq == 0.0


def test_part_pq_hand_example():
    # person segment matches exactly; head part IoU 8/10, torso 6/10
    gt = _row([PERSON] * 20, [HEAD] * 10 + [TORSO] * 10, [1] * 20)
    pred = _row([PERSON] * 20, [HEAD] * 8 + [0] * 2 + [TORSO] * 6 + [0] * 4, [1] * 20)
    res = part_pq(pred, gt, CPP)
    assert res.p == pytest.approx(0.7, abs=1e-12)
    assert res.all == pytest.approx(0.7, abs=1e-12)
    assert np.isnan(res.np)
    assert pq(pred, gt, CPP).pq == 1.0


def test_part_pq_equals_pq_without_partitionable_classes():
    gt = _row([ROAD] * 6 + [TRAIN] * 6, [0] * 12, [0] * 6 + [1] * 6)
    pred = _row([ROAD] * 4 + [TRAIN] * 8, [0] * 12, [0] * 4 + [1] * 8)
    assert part_pq(pred, gt, CPP).all == pq(pred, gt, CPP).pq


def test_gt_void_excluded_from_union():
    gt = _row([SKY] * 4 + [0] * 4, [0] * 8, [0] * 8)
    pred = _row([SKY] * 8, [0] * 8, [0] * 8)
    assert pq(pred, gt, CPP).pq == 1.0


def test_density_examples():
    assert density(_row([ROAD] * 12, [0] * 12, [0] * 12)) == 1.0
    assert density(_row([0] * 3 + [ROAD] * 9, [0] * 12, [0] * 12)) == 0.75
    assert density(LabelMap.void(3, 4)) == 0.0


def test_miou_examples():
    gt = np.array([[0, 1, 2]])
    assert miou(gt, gt, 3).mean == 1.0
    gt = np.array([[1, 1, 0, 0]])
    pred = np.array([[1, 0, 0, 0]])
    res = miou(pred, gt, 2)
    assert res.per_class[1] == 0.5
    res = miou(np.array([[0, 0]]), np.array([[0, 0]]), 3)
    assert np.isnan(res.per_class[2]) and res.mean == 1.0


def _det(score, mask, cls=PERSON):
    h, w = mask.shape
    return Detection(cls, score, BBox(0, 0, w, h), np.where(mask, 4.0, -4.0).astype(np.float32))


def test_ap_examples():
    g = np.zeros((4, 4), bool)
    g[:2, :2] = True
    wrong = np.zeros((4, 4), bool)
    wrong[2:, 2:] = True
    assert mask_ap([_det(0.9, g)], [(PERSON, g)]).mean == 1.0
    assert mask_ap([_det(0.9, wrong), _det(0.8, g)], [(PERSON, g)], 0.5).mean == pytest.approx(0.5)
    assert mask_ap([], [(PERSON, g)], image_shape=(4, 4)).mean == 0.0


def test_ap_coco_thresholds():
    g = np.zeros((10, 10), bool)
    g[:, :8] = True
    d = np.zeros((10, 10), bool)
    d[:, :6] = True  # IoU 0.75
    res = mask_ap([_det(0.9, d)], [(PERSON, g)], COCO_IOU_THRESHOLDS)
    assert res.mean == pytest.approx(6 / 10)


def test_evaluator_pq_identity_on_scenes():
    ev = PanopticPartEvaluator(CPP)
    for seed in range(5):
        scene = generate_scene(SceneConfig(seed=seed, logit_noise_sigma=1.0, bbox_jitter=2))
        pred = jppf(scene.sem, scene.parts, scene.dets, CPP)
        for st_ in match_segments(pred, scene.gt, CPP).values():
            assert abs(st_.pq - st_.sq * st_.rq) <= 1e-12
        ev.update(pred, scene.gt, scene.sem, scene.parts, scene.dets)
    rep = ev.report()
    assert rep.n_images == 5
    for key in ("sem_miou", "inst_ap", "part_miou", "partpq_all", "density"):
        assert 0.0 <= getattr(rep, key) <= 1.0
    assert "PartPQ All" in rep.to_text(CPP)
    assert "partpq_all = " in rep.to_kv()


def test_evaluate_perfect():
    scene = generate_scene(SceneConfig(seed=1))
    rep = evaluate(scene.gt, scene.gt, CPP, scene.sem, scene.parts, scene.dets)
    assert (rep.partpq_all, rep.sem_miou, rep.part_miou, rep.inst_ap, rep.density) == (1, 1, 1, 1, 1)
    assert np.isnan(evaluate(scene.gt, scene.gt, CPP).sem_miou)
