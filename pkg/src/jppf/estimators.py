"""scikit-learn style wrappers around the fusion and the top-down baseline.

Nothing is learned: ``fit`` only resolves the catalog and validates the
hyper-parameters, so both estimators slot into parameter searches and
``sklearn.base.clone``.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import FusionConfig
from .detections import Detection
from .fusion import jppf, panoptic_fuse_two
from .labelmap import LabelMap
from .merge import part_map_from_logits, top_down_merge
from .metrics import PanopticPartEvaluator
from .taxonomy import load_catalog


class HeadOutputs(NamedTuple):
    """Everything the three prediction heads produce for one image."""

    sem: np.ndarray
    parts: np.ndarray
    detections: Sequence[Detection]


def _as_batch(X):
    if isinstance(X, HeadOutputs):
        return [X], True
    items = list(X)
    for item in items:
        if not isinstance(item, HeadOutputs):
            raise TypeError(f"expected HeadOutputs or a sequence of them, got {type(item).__name__}")
    return items, False


class _FusionBase(BaseEstimator):
    def __init__(self, catalog="cpp", confidence_threshold=0.5, overlap_threshold=0.5,
                 min_stuff=None, normalize_heads=True, n_jobs=1):
        self.catalog = catalog
        self.confidence_threshold = confidence_threshold
        self.overlap_threshold = overlap_threshold
        self.min_stuff = min_stuff
        self.normalize_heads = normalize_heads
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        self.catalog_ = load_catalog(self.catalog)
        self.config_ = FusionConfig(self.confidence_threshold, self.overlap_threshold,
                                    self.min_stuff, self.normalize_heads)
        if int(self.n_jobs) < 1:
            raise ValueError(f"n_jobs must be >= 1, got {self.n_jobs}")
        return self

    def _predict_one(self, x: HeadOutputs) -> LabelMap:
        raise NotImplementedError

    def predict(self, X):
        """Fuse one ``HeadOutputs`` into a LabelMap, or a sequence into a list."""
        check_is_fitted(self, "catalog_")
        items, single = _as_batch(X)
        out = [self._predict_one(x) for x in items]
        return out[0] if single else out

    def score(self, X, y: Sequence[LabelMap] | LabelMap) -> float:
        """PartPQ (all classes) of the predictions against ground truth."""
        preds = self.predict(X)
        if isinstance(preds, LabelMap):
            preds, y = [preds], [y]
        ev = PanopticPartEvaluator(self.catalog_)
        for pred, gt in zip(preds, y, strict=True):
            ev.update(pred, gt)
        return ev.report().partpq_all


class JointPanopticPartFusion(_FusionBase):
    """Single-pass fusion of semantic, instance and part head outputs.

    Examples
    --------
    >>> from jppf.synth import SceneConfig, generate_scene
    >>> scene = generate_scene(SceneConfig(seed=3))
    >>> est = JointPanopticPartFusion(min_stuff=0).fit()
    >>> est.score(HeadOutputs(scene.sem, scene.parts, scene.dets), scene.gt)
    1.0
    """

    def _predict_one(self, x: HeadOutputs) -> LabelMap:
        return jppf(x.sem, x.parts, x.detections, self.catalog_, self.config_, int(self.n_jobs))


class TopDownMergeBaseline(_FusionBase):
    """Panoptic fusion of semantic and instance outputs, then a part overlay."""

    def _predict_one(self, x: HeadOutputs) -> LabelMap:
        panoptic = panoptic_fuse_two(x.sem, x.detections, self.catalog_, self.config_, int(self.n_jobs))
        return top_down_merge(panoptic, part_map_from_logits(x.parts), self.catalog_)
