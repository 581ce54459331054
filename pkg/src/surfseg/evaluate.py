"""Evaluation: boundary-overlap F1 for segment proposals, confusion-matrix
IoU/P/R/F1 for semantic output, and per-stage latency."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .cloud import CLASS_NAMES, N_CLASSES, SemanticClass, StructuredCloud

DILATION = 2


def edge_map(labels: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Valid cells whose 4-neighbourhood (columns wrap) has another label or validity."""
    labels = np.asarray(labels)
    valid = np.asarray(valid, dtype=bool)
    edge = np.zeros(labels.shape, dtype=bool)
    for axis, shift in ((1, 1), (1, -1)):
        l2 = np.roll(labels, shift, axis=axis)
        v2 = np.roll(valid, shift, axis=axis)
        edge |= (l2 != labels) | (v2 != valid)
    if labels.shape[0] > 1:
        diff = (labels[1:] != labels[:-1]) | (valid[1:] != valid[:-1])
        edge[1:] |= diff
        edge[:-1] |= diff
    return edge & valid


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev-disk dilation; wraps across columns, not rows."""
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0 or not mask.any():
        return mask.copy()
    size = 2 * radius + 1
    out = ndimage.maximum_filter(mask.astype(np.uint8), size=(size, size), mode=("constant", "wrap"), cval=0)
    return out.astype(bool)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def edge_f1(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray, radius: int = DILATION) -> PRF:
    """Boundary overlap between predicted segments and ground-truth instances."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt grids differ in shape")
    pe = edge_map(pred, valid)
    ge = edge_map(gt, valid)
    return edge_prf(pe, ge, radius)


def edge_prf(pred_edges: np.ndarray, gt_edges: np.ndarray, radius: int = DILATION) -> PRF:
    n_p, n_g = int(pred_edges.sum()), int(gt_edges.sum())
    if n_p == 0 and n_g == 0:
        return PRF(1.0, 1.0, 1.0)
    if n_p == 0 or n_g == 0:
        return PRF(0.0, 0.0, 0.0)
    precision = float((pred_edges & dilate(gt_edges, radius)).sum()) / n_p
    recall = float((gt_edges & dilate(pred_edges, radius)).sum()) / n_g
    return PRF(precision, recall, _f1(precision, recall))


class ConfusionMatrix:
    """5x5 counts, rows = ground truth, columns = prediction."""

    def __init__(self, counts: Optional[np.ndarray] = None):
        self.counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64).copy()

    @classmethod
    def from_labels(cls, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64).ravel()
        gt = np.asarray(gt, dtype=np.int64).ravel()
        if pred.shape != gt.shape:
            raise ValueError("pred and gt must align")
        flat = np.bincount(gt * N_CLASSES + pred, minlength=N_CLASSES * N_CLASSES)
        return cls(flat.reshape(N_CLASSES, N_CLASSES))

    def add(self, pred, gt) -> "ConfusionMatrix":
        self.counts += ConfusionMatrix.from_labels(pred, gt).counts
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()


@dataclass
class IoUReport:
    iou: np.ndarray  # per class, NaN when excluded
    miou: float
    included: np.ndarray
    confusion: ConfusionMatrix


def miou(pred=None, gt=None, confusion: Optional[ConfusionMatrix] = None) -> IoUReport:
    """Per-class IoU and their mean over every class seen in ground truth or
    prediction (a class absent from both is left out).

    Pass either aligned ``pred``/``gt`` code arrays or an accumulated
    ``confusion``.
    """
    cm = confusion if confusion is not None else ConfusionMatrix.from_labels(pred, gt)
    tp, fp, fn = cm.tp(), cm.fp(), cm.fn()
    denom = tp + fp + fn
    included = denom > 0
    iou = np.full(N_CLASSES, np.nan)
    iou[included] = tp[included] / denom[included]
    m = float(iou[included].mean()) if included.any() else float("nan")
    return IoUReport(iou, m, included, cm)


@dataclass
class ClassPRF:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    zero_support: np.ndarray
    macro: PRF


def classwise_prf(cm: ConfusionMatrix) -> ClassPRF:
    """Per-class and macro precision/recall/F1.

    Classes with no ground-truth support get zeros and are flagged; the macro
    average runs over supported classes.
    """
    tp, fp, fn = cm.tp().astype(float), cm.fp().astype(float), cm.fn().astype(float)
    precision = np.divide(tp, tp + fp, out=np.zeros(N_CLASSES), where=(tp + fp) > 0)
    recall = np.divide(tp, tp + fn, out=np.zeros(N_CLASSES), where=(tp + fn) > 0)
    f1 = np.divide(2 * precision * recall, precision + recall, out=np.zeros(N_CLASSES),
                   where=(precision + recall) > 0)
    zero = (tp + fn) == 0
    precision[zero] = recall[zero] = f1[zero] = 0.0
    keep = ~zero
    if keep.any():
        macro = PRF(float(precision[keep].mean()), float(recall[keep].mean()), float(f1[keep].mean()))
    else:
        macro = PRF(0.0, 0.0, 0.0)
    return ClassPRF(precision, recall, f1, zero, macro)


def metrics_csv(report: IoUReport, prf: ClassPRF) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou", "precision", "recall", "f1"])
    for c in SemanticClass:
        iou = report.iou[c]
        w.writerow([CLASS_NAMES[c], "nan" if np.isnan(iou) else f"{iou:.6f}",
                    f"{prf.precision[c]:.6f}", f"{prf.recall[c]:.6f}", f"{prf.f1[c]:.6f}"])
    w.writerow(["overall", f"{report.miou:.6f}", f"{prf.macro.precision:.6f}",
                f"{prf.macro.recall:.6f}", f"{prf.macro.f1:.6f}"])
    return buf.getvalue()


def metrics_table(report: IoUReport, prf: ClassPRF) -> str:
    lines = [f"{'class':<14}{'iou':>8}{'prec':>8}{'recall':>8}{'f1':>8}"]
    for c in SemanticClass:
        iou = report.iou[c]
        iou_s = "   -" if np.isnan(iou) else f"{iou:.3f}"
        lines.append(f"{CLASS_NAMES[c]:<14}{iou_s:>8}{prf.precision[c]:>8.3f}"
                     f"{prf.recall[c]:>8.3f}{prf.f1[c]:>8.3f}")
    lines.append(f"{'overall':<14}{report.miou:>8.3f}{prf.macro.precision:>8.3f}"
                 f"{prf.macro.recall:>8.3f}{prf.macro.f1:>8.3f}")
    return "\n".join(lines)


# --- latency ---------------------------------------------------------------

@dataclass
class LatencyReport:
    samples: dict[str, list[float]] = field(default_factory=dict)

    def add(self, timings: dict[str, float]) -> None:
        for k, v in timings.items():
            self.samples.setdefault(k, []).append(v)

    def stats(self, stage: str) -> tuple[float, float, float]:
        s = np.asarray(self.samples[stage])
        return float(s.mean()), float(s.max()), float(s.min())

    @property
    def stages(self) -> list[str]:
        return list(self.samples)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "avg_ms", "max_ms", "min_ms"])
        for st in self.stages:
            avg, mx, mn = self.stats(st)
            w.writerow([st, f"{avg:.3f}", f"{mx:.3f}", f"{mn:.3f}"])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'stage':<10}{'avg ms':>10}{'max ms':>10}{'min ms':>10}"]
        for st in self.stages:
            avg, mx, mn = self.stats(st)
            lines.append(f"{st:<10}{avg:>10.2f}{mx:>10.2f}{mn:>10.2f}")
        return "\n".join(lines)


def bench_pipeline(clouds: Sequence[StructuredCloud], params=None, repetitions: int = 3,
                   warmup: int = 1, model=None) -> LatencyReport:
    """Wall-clock per stage over every cloud x repetition; warm-up runs are discarded."""
    from .pipeline import PipelineParams, run_cloud

    params = params or PipelineParams()
    report = LatencyReport()
    for cloud in clouds[:1] * warmup:
        run_cloud(cloud, params, model)
    for _ in range(repetitions):
        for cloud in clouds:
            report.add(run_cloud(cloud, params, model).timings)
    return report
