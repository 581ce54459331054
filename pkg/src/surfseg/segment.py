"""Segment proposals by depth-first growth over the mesh, plus densification.

Two linked points join the same segment when the angle between their
normals and their range-normalised distance are both under threshold.
Seeds are taken in column-major order over the subsampled grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .cloud import StructuredCloud
from .mesh import MAX_DEGREE, Mesh, SubsampledCloud
from .normals import NormalMap

THETA_THRES = 0.2618
DIST_THRES = 0.05


@dataclass(frozen=True)
class SegmentationParams:
    theta_thres: float = THETA_THRES
    dist_thres: float = DIST_THRES

    def __post_init__(self):
        if not (self.theta_thres >= 0 and self.dist_thres > 0):
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-cell segment labels on a grid (0 = unlabelled, segments are 1..K)."""

    labels: np.ndarray  # (rows, cols) int32
    n_segments: int
    tree_edges: Optional[list[tuple[int, int]]] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def dump(self, path) -> None:
        rows, cols = self.labels.shape
        with open(path, "w") as fh:
            for (i, j), lab in np.ndenumerate(self.labels):
                fh.write(f"{i} {j} {lab}\n")


def angle_between(n1, n2) -> float:
    a = np.asarray(n1, dtype=float)
    b = np.asarray(n2, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero vector has no direction")
    c = float(np.dot(a, b) / (na * nb))
    return math.acos(max(-1.0, min(1.0, c)))


def normalized_distance(p, q, p_r: float, q_r: float) -> float:
    s = p_r + q_r
    if not s > 0:
        raise ValueError("range sum must be positive")
    return float(np.linalg.norm(np.asarray(q, float) - np.asarray(p, float)) / s)


def link_acceptance(mesh: Mesh, normals: NormalMap, positions: np.ndarray, ranges: np.ndarray,
                    params: SegmentationParams) -> np.ndarray:
    """(n, 6) bool: whether each stored link passes both thresholds.

    Both tests are symmetric in (p, q), so evaluating them once per slot is
    the same as evaluating them when the traversal reaches the link.
    """
    nb = mesh.neighbors.astype(np.int64)
    has = normals.has_normal
    q = np.maximum(nb, 0)
    present = (nb >= 0) & has[:, None] & has[q]
    n = np.nan_to_num(normals.normals)
    cos = np.einsum("nk,nsk->ns", n, n[q])
    # normals are unit length, so the magnitudes in the arccos formula are 1
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    gap = np.linalg.norm(positions[q] - positions[:, None, :], axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        dstar = gap / (ranges[:, None] + ranges[q])
    return present & (theta < params.theta_thres) & (dstar < params.dist_thres)


def column_major_order(rows: int, cols: int) -> np.ndarray:
    return np.arange(rows * cols).reshape(rows, cols).T.ravel()


def segment(mesh: Mesh, normals: NormalMap, sub: SubsampledCloud,
            params: SegmentationParams = SegmentationParams(),
            record_edges: bool = False) -> LabelMap:
    positions = sub.xyz().reshape(-1, 3)
    ranges = sub.r.ravel()
    accept = link_acceptance(mesh, normals, positions, ranges, params)
    if record_edges:
        return grow(mesh, normals.has_normal, accept, record_edges=True)
    return components(mesh, normals.has_normal, accept)


def components(mesh: Mesh, has_normal: np.ndarray, accept: np.ndarray) -> LabelMap:
    """Same labels as ``grow``, via compiled connected components.

    Acceptance is symmetric and never holds for a point without a normal, so
    each DFS region is exactly one component of the accepted-link graph among
    normal-bearing points; numbering follows the same column-major seed order.
    """
    n = mesh.size
    src = np.repeat(np.arange(n), MAX_DEGREE)[accept.ravel()]
    dst = mesh.neighbors.ravel()[accept.ravel()].astype(np.int64)
    graph = sparse.csr_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(n, n))
    _, comp = csgraph.connected_components(graph, directed=False)
    comp = np.where(has_normal, comp + 1, 0).reshape(mesh.rows, mesh.cols)
    labels = relabel_by_first_seen(comp, column_major_order(mesh.rows, mesh.cols))
    return LabelMap(labels.astype(np.int32), int(labels.max()) if labels.size else 0)


def grow(mesh: Mesh, has_normal: np.ndarray, accept: np.ndarray,
         record_edges: bool = False) -> LabelMap:
    """Stack-based DFS labelling given precomputed per-link acceptance."""
    n = mesh.size
    labels = [0] * n
    nbrs = mesh.neighbors.tolist()
    acc = accept.tolist()
    seedable = has_normal.tolist()
    edges: Optional[list[tuple[int, int]]] = [] if record_edges else None
    label = 1
    for p0 in column_major_order(mesh.rows, mesh.cols).tolist():
        if labels[p0] or not seedable[p0]:
            continue
        labels[p0] = label
        stack = [p0]
        while stack:
            p = stack.pop()
            row_n, row_a = nbrs[p], acc[p]
            for s in range(MAX_DEGREE):
                q = row_n[s]
                if q < 0:
                    break
                if labels[q] == 0 and row_a[s]:
                    labels[q] = label
                    stack.append(q)
                    if edges is not None:
                        edges.append((p, q))
        label += 1
    arr = np.asarray(labels, dtype=np.int32).reshape(mesh.rows, mesh.cols)
    return LabelMap(arr, label - 1, edges)


def densify(labels: LabelMap, sub: SubsampledCloud, full: Optional[StructuredCloud] = None) -> LabelMap:
    """Give every valid full-resolution cell the label of the nearest labelled
    sampled cell in its row (column distance, cyclic; ties go to the lower
    column index). Rows without any labelled cell stay 0."""
    full = sub.parent if full is None else full
    rows, cols = full.shape
    out = np.zeros((rows, cols), dtype=np.int32)
    src_cols = sub.col_index
    all_cols = np.arange(cols)
    for i in range(rows):
        lab_row = labels.labels[i]
        has = lab_row > 0
        if not has.any():
            continue
        lc = src_cols[has]
        lv = lab_row[has]
        m = len(lc)
        pos = np.searchsorted(lc, all_cols)
        nxt = pos % m
        prv = (pos - 1) % m
        d_next = (lc[nxt] - all_cols) % cols
        d_prev = (all_cols - lc[prv]) % cols
        # exact hits land in nxt with distance 0
        pick_prev = (d_prev < d_next) | ((d_prev == d_next) & (lc[prv] < lc[nxt]))
        row_labels = np.where(pick_prev, lv[prv], lv[nxt])
        out[i] = np.where(full.valid[i], row_labels, 0)
    return LabelMap(out, labels.n_segments)


def relabel_by_first_seen(labels: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Renumber positive labels 1..K by first appearance along ``order``."""
    flat = labels.ravel()
    seq = flat[order]
    seq = seq[seq > 0]
    _, first = np.unique(seq, return_index=True)
    uniq = seq[np.sort(first)]
    mapping = np.zeros(flat.max() + 1 if flat.size else 1, dtype=np.int32)
    mapping[uniq] = np.arange(1, len(uniq) + 1)
    return mapping[flat].reshape(labels.shape)
