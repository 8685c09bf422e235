import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from jppf import metrics
from jppf._validation import CatalogMismatchError
from jppf.config import FusionConfig
from jppf.detections import Detection, filter_detections
from jppf.fusion import (
    FusedLogitStack, assemble_canvas, build_masked_logits, fuse_instance, fuse_masked_logits,
    fuse_stuff, jppf, panoptic_fuse_two,
)
from jppf.synth import SceneConfig, generate_scene, naive_fusion_oracle
from jppf.taxonomy import ClassCatalog, ClassDef, preset_catalog
from jppf.tensors import BBox, ShapeError, softmax_channels

CPP = preset_catalog("cpp")
PERSON = CPP.by_name("person").class_id
CAR = CPP.by_name("car").class_id
TRAIN = CPP.by_name("train").class_id
ROAD = CPP.by_name("road").class_id

finite32 = st.floats(-30, 30, width=32, allow_subnormal=False)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def eq1_reference(values):
    """Float64 evaluation of (sum sigmoid) * (sum), independent of the engine."""
    return sum(_sig(v) for v in values) * sum(values)


# -- fused-logit formula ----------------------------------------------------

def test_eq1_examples():
    one = np.ones(1, np.float32)
    zero = np.zeros(1, np.float32)
    assert fuse_masked_logits([zero, zero, zero])[0] == 0.0
    assert fuse_masked_logits([one, one, one])[0] == pytest.approx(eq1_reference([1, 1, 1]), abs=1e-5)
    assert eq1_reference([1, 1, 1]) == pytest.approx(6.57953, abs=1e-5)
    assert fuse_masked_logits([2 * one, -2 * one])[0] == pytest.approx(0.0, abs=1e-6)


@settings(max_examples=200)
@given(st.lists(finite32, min_size=1, max_size=5))
def test_eq1_matches_float64(values):
    arrays = [np.array([v], np.float32) for v in values]
    expected = eq1_reference([float(a[0]) for a in arrays])
    assert fuse_masked_logits(arrays)[0] == pytest.approx(expected, rel=1e-4, abs=1e-3)


@settings(max_examples=200)
@given(hnp.arrays(np.float32, (3, 4), elements=finite32))
def test_eq1_permutation_invariant_bitexact(t):
    ref = fuse_masked_logits([t[0], t[1], t[2]])
    for perm in permutations(range(3)):
        assert fuse_masked_logits([t[i] for i in perm]).tobytes() == ref.tobytes()


def test_eq1_permutation_invariant_random_triples():
    t = np.random.default_rng(7).normal(scale=5, size=(3, 1000)).astype(np.float32)
    ref = fuse_masked_logits([t[0], t[1], t[2]])
    for perm in permutations(range(3)):
        assert fuse_masked_logits([t[i] for i in perm]).tobytes() == ref.tobytes()


def test_eq1_four_terms_invariant():
    t = np.random.default_rng(8).normal(size=(4, 200)).astype(np.float32)
    ref = fuse_masked_logits(list(t))
    assert fuse_masked_logits([t[3], t[1], t[0], t[2]]).tobytes() == ref.tobytes()


def test_eq1_rejects_bad_input():
    with pytest.raises(ValueError):
        fuse_masked_logits([])
    with pytest.raises(ValueError):
        fuse_masked_logits([np.zeros(2, np.float32), np.zeros(3, np.float32)])


@settings(max_examples=100)
@given(st.floats(0, 1, width=32), st.floats(0, 10, width=32),
       hnp.arrays(np.float32, 4, elements=st.floats(0, 1, width=32), unique=True))
def test_consistent_heads_keep_part_ranking(sem_value, mask_logit, part_values):
    # with agreeing (non-negative) mask logits the fused ranking follows the part head
    mls = np.full(4, sem_value, np.float32)
    mli = np.full(4, mask_logit, np.float32)
    fused = fuse_masked_logits([mls, mli, part_values])
    assert np.argmax(fused) == np.argmax(part_values)


# -- per-instance and stuff fusion -------------------------------------------

def _person_det(box=BBox(2, 1, 6, 5), value=1.0, score=0.9):
    return Detection(PERSON, score, box, np.full((box.height, box.width), value, np.float32))


def test_build_masked_logits_shapes():
    rng = np.random.default_rng(0)
    sem = rng.normal(size=(19, 8, 8)).astype(np.float32)
    parts = rng.normal(size=(10, 8, 8)).astype(np.float32)
    det = _person_det()
    mls, mli, mlp = build_masked_logits(det, sem, parts, CPP)
    assert mls.shape == mli.shape == mlp.shape == (4, 8, 8)
    outside = np.ones((8, 8), bool)
    outside[det.box.slices] = False
    for t in (mls, mli, mlp):
        assert np.all(t[:, outside] == 0)
    np.testing.assert_array_equal(mlp[:, 1:5, 2:6], parts[1:5, 1:5, 2:6])

    train = Detection(TRAIN, 0.9, BBox(0, 0, 3, 3), np.ones((3, 3), np.float32))
    mls, mli, mlp = build_masked_logits(train, sem, parts, CPP)
    assert mls.shape == (1, 8, 8)
    np.testing.assert_array_equal(mlp[0, :3, :3], parts[0, :3, :3])


def test_fuse_instance_matches_literal_construction():
    rng = np.random.default_rng(1)
    sem = softmax_channels(rng.normal(size=(19, 8, 8)).astype(np.float32))
    parts = softmax_channels(rng.normal(size=(10, 8, 8)).astype(np.float32))
    det = Detection(CAR, 0.9, BBox(1, 2, 7, 6), rng.normal(size=(4, 6)).astype(np.float32))
    stack = fuse_instance(det, sem, parts, CPP)
    literal = fuse_masked_logits(list(build_masked_logits(det, sem, parts, CPP)))
    np.testing.assert_array_equal(stack.dense(), literal)
    assert stack.legend == tuple((CAR, p, 0) for p in range(5, 10))


def test_fuse_instance_zero_inputs():
    det = _person_det(value=0.0)
    stack = fuse_instance(det, np.zeros((19, 8, 8), np.float32), np.zeros((10, 8, 8), np.float32), CPP)
    assert stack.n_channels == 4 and np.all(stack.dense() == 0)


def test_fuse_instance_independent_per_detection():
    rng = np.random.default_rng(2)
    sem = rng.normal(size=(19, 8, 8)).astype(np.float32)
    parts = rng.normal(size=(10, 8, 8)).astype(np.float32)
    a, b = _person_det(BBox(0, 0, 3, 3), 1.0), _person_det(BBox(4, 4, 8, 8), 2.0)
    alone = fuse_instance(a, sem, parts, CPP).dense()
    fuse_instance(b, sem, parts, CPP)
    np.testing.assert_array_equal(fuse_instance(a, sem, parts, CPP).dense(), alone)


def test_fuse_stuff_examples():
    sem = np.zeros((19, 2, 2), np.float32)
    parts = np.zeros((10, 2, 2), np.float32)
    stack = fuse_stuff(sem, parts, CPP)
    assert stack.n_channels == 11 and np.all(stack.logits == 0)
    sem[CPP.channel_of(ROAD), 0, 0] = 2
    parts[0, 0, 0] = 2
    value = fuse_stuff(sem, parts, CPP).logits[0, 0, 0]
    assert value == pytest.approx(2 * _sig(2) * 4, abs=1e-5)
    assert value == pytest.approx(7.0464, abs=1e-4)


# -- canvas --------------------------------------------------------------------

def _road_only(h, w):
    sem = np.zeros((19, h, w), np.float32)
    sem[CPP.channel_of(ROAD)] = 5
    return sem


def test_no_detections_single_region():
    sem = _road_only(6, 7)
    out = jppf(sem, np.zeros((10, 6, 7), np.float32), [], CPP, FusionConfig(min_stuff=10))
    assert np.all(out.semantic == ROAD) and np.all(out.part == 0) and np.all(out.instance == 0)
    out = jppf(sem, np.zeros((10, 6, 7), np.float32), [], CPP, FusionConfig(min_stuff=43))
    assert out.void_mask.all()


def test_small_island_becomes_void():
    sem = _road_only(64, 64)
    sky = CPP.by_name("sky").class_id
    sem[CPP.channel_of(sky), 10:20, 30:40] = 9
    out = jppf(sem, np.zeros((10, 64, 64), np.float32), [], CPP, FusionConfig(min_stuff=2048))
    assert out.void_mask[10:20, 30:40].all()
    assert out.void_mask.sum() == 100
    assert np.all(out.semantic[~out.void_mask] == ROAD)


def test_default_min_stuff_scales_with_area():
    assert FusionConfig().min_stuff_for(1024, 2048) == 2048
    assert FusionConfig().min_stuff_for(64, 64) == 4
    assert FusionConfig(min_stuff=0).min_stuff_for(1024, 2048) == 0


def test_cropped_and_dense_stacks_agree():
    scene = generate_scene(SceneConfig(seed=11, logit_noise_sigma=1.0, bbox_jitter=2))
    sem, parts = softmax_channels(scene.sem), softmax_channels(scene.parts)
    kept = filter_detections(scene.dets)
    cropped = [fuse_instance(d, sem, parts, CPP) for d in kept]
    dense = [FusedLogitStack(s.dense(), s.legend, s.image_shape) for s in cropped]
    stuff = fuse_stuff(sem, parts, CPP)
    a = assemble_canvas(cropped, stuff, sem, CPP)
    assert a == assemble_canvas(dense, stuff, sem, CPP)
    assert a == jppf(scene.sem, scene.parts, scene.dets, CPP)


def test_boxed_instance_wins_outside_box_only_on_ties():
    # raw (non-normalized) logits can push every stuff score below the
    # implicit zeros of a box-masked instance: the first instance channel wins
    sem = np.full((19, 3, 3), -1.0, np.float32)
    parts = np.full((10, 3, 3), -1.0, np.float32)
    det = Detection(TRAIN, 0.9, BBox(0, 0, 1, 1), np.full((1, 1), 3.0, np.float32))
    cfg = FusionConfig(normalize_heads=False, min_stuff=0)
    out = jppf(sem, parts, [det], CPP, cfg)
    assert out == naive_fusion_oracle(sem, parts, [det], CPP, cfg)
    assert np.all(out.semantic == TRAIN)


# -- end-to-end ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("catalog", ["cpp", "ppp"])
def test_noiseless_equals_ground_truth(seed, catalog):
    cat = preset_catalog(catalog)
    scene = generate_scene(SceneConfig(seed=seed, catalog=catalog))
    out = jppf(scene.sem, scene.parts, scene.dets, cat, FusionConfig(min_stuff=0))
    assert out == scene.gt
    pan = panoptic_fuse_two(scene.sem, scene.dets, cat, FusionConfig(min_stuff=0))
    np.testing.assert_array_equal(pan.semantic, scene.gt.semantic)
    np.testing.assert_array_equal(pan.instance, scene.gt.instance)
    assert np.all(pan.part == 0)


def _legal(lm, cat):
    t = cat.lookup_tables()
    s, p, i = (lm.semantic.astype(int), lm.part.astype(int), lm.instance.astype(int))
    void = s == 0
    stuff = t["is_stuff"][s]
    thing = t["is_thing"][s]
    ok = void | (stuff & (p == 0) & (i == 0))
    ok |= thing & (i >= 1) & np.where(t["partitionable"][s], t["allowed_parts"][s, p], p == 0)
    return bool(ok.all()) and bool(np.all((void & ((p != 0) | (i != 0))) == False))  # noqa: E712


@pytest.mark.parametrize("seed", range(6))
def test_output_triples_are_legal(seed):
    for name in ("cpp", "ppp"):
        cat = preset_catalog(name)
        scene = generate_scene(SceneConfig(seed=seed, catalog=name, logit_noise_sigma=2.0, bbox_jitter=3))
        assert _legal(jppf(scene.sem, scene.parts, scene.dets, cat), cat)


@pytest.mark.parametrize("seed", range(6))
def test_void_only_from_min_stuff(seed):
    scene = generate_scene(SceneConfig(seed=seed, logit_noise_sigma=1.5, bbox_jitter=2))
    unfiltered = jppf(scene.sem, scene.parts, scene.dets, CPP, FusionConfig(min_stuff=0))
    filtered = jppf(scene.sem, scene.parts, scene.dets, CPP)
    assert not unfiltered.void_mask.any()
    changed = np.any(unfiltered.planes != filtered.planes, axis=0)
    assert np.all(filtered.void_mask[changed])
    assert np.all(CPP.lookup_tables()["is_stuff"][unfiltered.semantic[changed]])


def test_thread_count_does_not_change_output():
    scene = generate_scene(SceneConfig(seed=5, logit_noise_sigma=1.0, n_instances=(5, 5)))
    ref = jppf(scene.sem, scene.parts, scene.dets, CPP)
    assert jppf(scene.sem, scene.parts, scene.dets, CPP, n_jobs=4) == ref
    assert panoptic_fuse_two(scene.sem, scene.dets, CPP, n_jobs=3) == panoptic_fuse_two(scene.sem, scene.dets, CPP)


@pytest.mark.parametrize("sigma", [0.0, 0.5, 1.0])
def test_empty_part_head_matches_two_head_fusion(sigma):
    flat = ClassCatalog(tuple(ClassDef(c.class_id, c.name, c.kind, ()) for c in CPP.classes), 1)
    for seed in range(5):
        scene = generate_scene(SceneConfig(seed=seed, logit_noise_sigma=sigma, bbox_jitter=2))
        parts = np.zeros((1,) + scene.sem.shape[1:], np.float32)
        a = jppf(scene.sem, parts, scene.dets, flat)
        b = panoptic_fuse_two(scene.sem, scene.dets, flat)
        np.testing.assert_array_equal(a.semantic, b.semantic)
        np.testing.assert_array_equal(a.instance, b.instance)


def test_all_filtered_is_stuff_fill():
    scene = generate_scene(SceneConfig(seed=2, logit_noise_sigma=0.5))
    cfg = FusionConfig(confidence_threshold=1.0)
    low = [Detection(d.class_id, 0.5, d.box, d.mask_logits) for d in scene.dets]
    out = panoptic_fuse_two(scene.sem, low, CPP, cfg)
    assert out == panoptic_fuse_two(scene.sem, [], CPP, cfg)
    assert not out.instance.any()


def test_consistency_on_noisy_scene():
    # inside accepted instances, agreeing heads keep the part ranking
    scene = generate_scene(SceneConfig(seed=4, logit_noise_sigma=1.0, n_instances=(4, 6)))
    sem, parts = softmax_channels(scene.sem), softmax_channels(scene.parts)
    for det in filter_detections(scene.dets):
        stack = fuse_instance(det, sem, parts, CPP)
        channels = [p for _, p, _ in stack.legend]
        ys, xs = det.box.slices
        crop = parts[channels][:, ys, xs]
        agree = det.mask_logits > 0
        np.testing.assert_array_equal(np.argmax(stack.logits, axis=0)[agree], np.argmax(crop, axis=0)[agree])


def test_input_validation():
    sem = np.zeros((19, 4, 4), np.float32)
    with pytest.raises(CatalogMismatchError):
        jppf(sem, np.zeros((9, 4, 4), np.float32), [], CPP)
    with pytest.raises(ShapeError):
        jppf(sem, np.zeros((10, 4, 5), np.float32), [], CPP)
    with pytest.raises(CatalogMismatchError):
        jppf(sem, np.zeros((10, 4, 4), np.float32),
             [Detection(ROAD, 0.9, BBox(0, 0, 1, 1), np.ones((1, 1), np.float32))], CPP)
    with pytest.raises(ValueError):
        jppf(sem, np.zeros((10, 4, 4), np.float32),
             [Detection(PERSON, 0.9, BBox(0, 0, 5, 1), np.ones((1, 5), np.float32))], CPP)
    with pytest.raises(ValueError):
        jppf(sem, None, [], CPP)


def test_metrics_of_noiseless_fusion_are_perfect():
    scene = generate_scene(SceneConfig(seed=9))
    out = jppf(scene.sem, scene.parts, scene.dets, CPP, FusionConfig(min_stuff=0))
    assert metrics.part_pq(out, scene.gt, CPP).all == 1.0
