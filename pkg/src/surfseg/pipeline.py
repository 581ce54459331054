"""End-to-end per-cloud processing: mesh, normals, segments, densify,
features and (optionally) semantic prediction."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .classifier import ForestModel
from .cloud import StructuredCloud
from .features import N_BINS, LabeledFeature, attach_classes, extract_features, stack
from .mesh import Mesh, SubsampledCloud, build_mesh, subsample
from .normals import NormalMap, estimate_normals
from .segment import LabelMap, SegmentationParams, densify, segment

STAGES = ("mesh", "normals", "segment", "densify", "features", "predict")


@dataclass(frozen=True)
class PipelineParams:
    k_interval: int = 5
    theta_thres: float = 0.2618
    dist_thres: float = 0.05
    bins: int = N_BINS

    @property
    def seg(self) -> SegmentationParams:
        return SegmentationParams(self.theta_thres, self.dist_thres)


@dataclass
class CloudResult:
    cloud: StructuredCloud
    sub: SubsampledCloud
    mesh: Mesh
    normals: NormalMap
    labels: LabelMap
    dense: LabelMap
    features: list[LabeledFeature]
    classes: Optional[np.ndarray] = None  # dense per-cell class codes
    timings: dict[str, float] = field(default_factory=dict)


def run_cloud(cloud: StructuredCloud, params: PipelineParams = PipelineParams(),
              model: Optional[ForestModel] = None, with_gt: bool = False) -> CloudResult:
    """Process one cloud, timing each stage in milliseconds."""
    t = {}
    t0 = time.perf_counter()
    sub = subsample(cloud, params.k_interval)
    mesh = build_mesh(sub)
    t1 = time.perf_counter()
    normals = estimate_normals(mesh, sub)
    t2 = time.perf_counter()
    labels = segment(mesh, normals, sub, params.seg)
    t3 = time.perf_counter()
    dense = densify(labels, sub, cloud)
    t4 = time.perf_counter()
    feats = extract_features(labels, normals, params.bins)
    if with_gt and cloud.has_gt:
        feats = attach_classes(feats, labels, normals, sub.gt_class)
    t5 = time.perf_counter()
    classes = None
    if model is not None:
        classes = semantic_classes(dense, feats, model, cloud.valid)
    t6 = time.perf_counter()
    t.update(mesh=t1 - t0, normals=t2 - t1, segment=t3 - t2, densify=t4 - t3,
             features=t5 - t4, predict=t6 - t5)
    t = {k: v * 1000.0 for k, v in t.items()}
    t["total"] = sum(t.values())
    return CloudResult(cloud, sub, mesh, normals, labels, dense, feats, classes, t)


def semantic_classes(dense: LabelMap, feats: list[LabeledFeature], model: ForestModel,
                     valid: np.ndarray) -> np.ndarray:
    """Per-cell class codes: each segment takes its predicted class.

    Valid cells left without a segment (a row with no labelled sample) take
    the cloud's most common predicted class, weighted by segment size.
    """
    n_lab = max(dense.n_segments, max((f.segment_id for f in feats), default=0))
    seg_cls = np.full(n_lab + 1, -1, dtype=np.int64)
    if feats:
        X, _ = stack(feats, (len(feats[0].feature.vector) - 1) // 3)
        pred = model.predict_many(X)
        ids = np.array([f.segment_id for f in feats])
        seg_cls[ids] = pred
        sizes = np.array([f.n_points for f in feats], dtype=float)
        fallback = int(np.argmax(np.bincount(pred, weights=sizes, minlength=5)))
    else:
        fallback = 0
    seg_cls[seg_cls < 0] = fallback
    out = seg_cls[dense.labels]
    return np.where(valid, out, 0).astype(np.int8)


def training_features(cloud: StructuredCloud, params: PipelineParams = PipelineParams()) -> list[LabeledFeature]:
    return run_cloud(cloud, params, with_gt=True).features
