"""Segment descriptors: density followed by three normal-component histograms."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .cloud import N_CLASSES, SemanticClass
from .normals import NormalMap
from .segment import LabelMap

log = logging.getLogger(__name__)

N_BINS = 16


def feature_dim(b: int = N_BINS) -> int:
    return 3 * b + 1


def bin_index(x: float, b: int = N_BINS) -> int:
    """Histogram bin of a normal component in [-1, 1]; values outside are clamped."""
    x = min(1.0, max(-1.0, float(x)))
    if x == 1.0:
        return b - 1
    return min(b - 1, int(math.floor(b * (x + 1.0) / 2.0)))


def bin_indices(x: np.ndarray, b: int = N_BINS) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
    idx = np.floor(b * (x + 1.0) / 2.0).astype(np.int64)
    return np.minimum(idx, b - 1)


@dataclass(frozen=True, eq=False)
class SegmentFeature:
    density: float
    h_i: np.ndarray
    h_j: np.ndarray
    h_k: np.ndarray

    @property
    def bins(self) -> int:
        return len(self.h_i)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([[self.density], self.h_i, self.h_j, self.h_k])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "SegmentFeature":
        v = np.asarray(v, dtype=float)
        b = (len(v) - 1) // 3
        if len(v) != 3 * b + 1:
            raise ValueError(f"feature length {len(v)} is not 3b+1")
        return cls(float(v[0]), v[1:1 + b], v[1 + b:1 + 2 * b], v[1 + 2 * b:])


@dataclass(frozen=True, eq=False)
class LabeledFeature:
    feature: SegmentFeature
    segment_id: int
    cls: Optional[SemanticClass] = None
    n_points: int = 0


def extract_features(labels: LabelMap, normals: NormalMap, b: int = N_BINS) -> list[LabeledFeature]:
    """One descriptor per segment label, in ascending label order.

    Only points carrying a normal contribute. Density is the segment's share
    of all normal-bearing points.
    """
    flat = labels.labels.ravel()
    has = normals.has_normal
    sel = has & (flat > 0)
    total = int(has.sum())
    if total == 0:
        return []
    seg = flat[sel]
    nrm = normals.normals[sel]
    n_lab = int(flat.max()) if flat.size else 0
    counts = np.bincount(seg, minlength=n_lab + 1)
    hists = []
    for axis in range(3):
        bi = bin_indices(nrm[:, axis], b)
        h = np.bincount(seg * b + bi, minlength=(n_lab + 1) * b).reshape(n_lab + 1, b)
        hists.append(h / np.maximum(counts, 1)[:, None])
    empty = np.setdiff1d(np.unique(flat[flat > 0]), np.nonzero(counts)[0])
    for lab in empty:
        log.warning("segment %d has no normals; skipped", lab)
    hi, hj, hk = hists
    return [LabeledFeature(SegmentFeature(c / total, hi[lab], hj[lab], hk[lab]), lab, None, c)
            for lab, c in enumerate(counts.tolist()) if lab > 0 and c > 0]


def majority_class(gt_classes: Iterable[int]) -> SemanticClass:
    """Most frequent class; ties break to the lowest class code."""
    codes = np.asarray(list(gt_classes), dtype=np.int64)
    if codes.size == 0:
        raise ValueError("empty segment")
    counts = np.bincount(codes, minlength=N_CLASSES)
    return SemanticClass(int(np.argmax(counts)))


def attach_classes(feats: list[LabeledFeature], labels: LabelMap, normals: NormalMap,
                   gt_class: np.ndarray) -> list[LabeledFeature]:
    """Label each feature by majority vote over its normal-bearing points."""
    flat = labels.labels.ravel()
    sel = normals.has_normal & (flat > 0)
    seg = flat[sel]
    gt = np.asarray(gt_class).ravel()[sel].astype(np.int64)
    n_lab = int(flat.max()) if flat.size else 0
    votes = np.bincount(seg * N_CLASSES + gt, minlength=(n_lab + 1) * N_CLASSES)
    votes = votes.reshape(n_lab + 1, N_CLASSES)
    return [
        LabeledFeature(f.feature, f.segment_id, SemanticClass(int(np.argmax(votes[f.segment_id]))),
                       f.n_points)
        for f in feats
    ]


def write_features(feats: Sequence[LabeledFeature], path) -> None:
    with open(path, "w") as fh:
        for f in feats:
            cls = "?" if f.cls is None else str(int(f.cls))
            vals = " ".join(repr(float(v)) for v in f.feature.vector)
            fh.write(f"{f.segment_id} {cls} {vals}\n")


def read_features(path) -> list[LabeledFeature]:
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        try:
            seg = int(parts[0])
            cls = None if parts[1] == "?" else SemanticClass(int(parts[1]))
            vec = [float(v) for v in parts[2:]]
        except (ValueError, IndexError):
            raise ValueError(f"{path}:{lineno}: malformed feature line") from None
        out.append(LabeledFeature(SegmentFeature.from_vector(vec), seg, cls))
    return out


def stack(feats: Sequence[LabeledFeature], b: int = N_BINS) -> tuple[np.ndarray, np.ndarray]:
    """(X, y) arrays; y is -1 where a feature has no class."""
    if not feats:
        return np.zeros((0, feature_dim(b))), np.zeros(0, dtype=np.int64)
    X = np.stack([f.feature.vector for f in feats])
    y = np.array([-1 if f.cls is None else int(f.cls) for f in feats], dtype=np.int64)
    return X, y
