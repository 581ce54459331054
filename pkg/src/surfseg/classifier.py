"""Segment classifiers: single decision tree, random decision forest (RDF),
extremely randomized trees (ERT) and k-nearest-neighbour.

Tree growth is delegated to scikit-learn. Fitted trees are copied into plain
pre-order arrays, which is what model files store; prediction rebuilds compiled
scikit-learn trees from those arrays and falls back to a numpy traversal.
"""

from __future__ import annotations

import gzip
import warnings
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cloud import N_CLASSES, SemanticClass

MODEL_MAGIC = "SLMODEL"
MODEL_VERSION = "v1"
VARIANTS = ("rdf", "ert", "dt", "knn")


class ModelFormatError(ValueError):
    pass


class ModelDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    n_trees: int = 100
    max_depth: Optional[int] = None
    min_leaf: int = 2
    max_features: str = "sqrt"
    k: int = 5
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Tree:
    """Array-encoded binary tree in pre-order.

    ``feature[i] == -1`` marks a leaf. Samples go left when
    ``x[feature] <= threshold``. ``counts`` holds per-class training counts
    at every node (bootstrap multiplicities included).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        # forests run to millions of nodes; 32-bit indices and counts halve their footprint
        for name in ("feature", "left", "right", "counts"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int32))

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def equals(self, other: "Tree") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("feature", "threshold", "left", "right", "counts")
        )


def gini(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


def leaf_tree(counts: Sequence[int]) -> Tree:
    return Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                np.asarray(counts, dtype=np.int64).reshape(1, N_CLASSES))


def _from_sklearn(est, classes: np.ndarray) -> Tree:
    t = est.tree_
    value = t.value[:, 0, :]
    weight = t.weighted_n_node_samples
    # sklearn stores class fractions; scale back to (bootstrap) counts
    local = np.rint(value * weight[:, None]).astype(np.int64)
    counts_all = np.zeros((t.node_count, N_CLASSES), dtype=np.int64)
    counts_all[:, classes] = local
    order = []
    stack = [0]
    while stack:
        i = stack.pop()
        order.append(i)
        if t.children_left[i] != -1:
            stack.append(t.children_right[i])
            stack.append(t.children_left[i])
    remap = np.full(t.node_count, -1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    order = np.array(order)
    is_leaf = t.children_left[order] == -1
    left = np.where(is_leaf, -1, remap[np.maximum(t.children_left[order], 0)])
    right = np.where(is_leaf, -1, remap[np.maximum(t.children_right[order], 0)])
    return Tree(
        np.where(is_leaf, -1, t.feature[order]).astype(np.int64),
        np.where(is_leaf, 0.0, t.threshold[order]).astype(np.float64),
        left.astype(np.int64),
        right.astype(np.int64),
        counts_all[order],
    )


def _tree_depth(tree: Tree) -> int:
    depth = np.zeros(tree.n_nodes, dtype=np.int64)
    level = np.array([0])
    d = 0
    while level.size:
        depth[level] = d
        inner = level[tree.feature[level] >= 0]
        level = np.concatenate([tree.left[inner], tree.right[inner]])
        d += 1
    return int(depth.max()) if tree.n_nodes else 0


def _to_sklearn_tree(tree: Tree, dim: int):
    from sklearn.tree._tree import Tree as SkTree

    # only apply() is used, so a one-column value table is enough
    proto = SkTree(dim, np.array([1], dtype=np.intp), 1)
    state = proto.__getstate__()
    nodes = np.zeros(tree.n_nodes, dtype=state["nodes"].dtype)
    leaf = tree.feature < 0
    nodes["left_child"] = tree.left
    nodes["right_child"] = tree.right
    nodes["feature"] = np.where(leaf, -2, tree.feature)
    nodes["threshold"] = np.where(leaf, -2.0, tree.threshold)
    n = tree.counts.sum(axis=1, dtype=np.int64)
    nodes["n_node_samples"] = n
    nodes["weighted_n_node_samples"] = n
    frac = tree.counts / np.maximum(n, 1)[:, None]
    nodes["impurity"] = 1.0 - np.sum(frac * frac, axis=1)
    values = n.astype(np.float64).reshape(tree.n_nodes, 1, 1)
    proto.__setstate__({"max_depth": _tree_depth(tree), "node_count": tree.n_nodes,
                        "nodes": nodes, "values": np.ascontiguousarray(values)})
    return proto


@dataclass(frozen=True, eq=False)
class ForestModel:
    variant: str
    dim: int
    params: ModelParams
    trees: tuple[Tree, ...] = ()
    train_X: Optional[np.ndarray] = None
    train_y: Optional[np.ndarray] = None

    @cached_property
    def _flat(self):
        """All trees packed into one node table for batched traversal."""
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        feat = np.concatenate([t.feature for t in self.trees])
        thr = np.concatenate([t.threshold for t in self.trees])
        left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offsets)])
        right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offsets)])
        counts = np.concatenate([t.counts for t in self.trees]).astype(float)
        tot = counts.sum(axis=1, keepdims=True)
        dist = np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)
        return offsets[:-1], feat, thr, left, right, dist

    @cached_property
    def _compiled(self):
        """Trees rebuilt as scikit-learn tree objects for compiled traversal,
        or None when that internal layout is unavailable."""
        try:
            return [_to_sklearn_tree(t, self.dim) for t in self.trees]
        except Exception:  # layout differs in this scikit-learn build
            return None

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ModelDimensionError(f"model expects {self.dim} features, got {X.shape[1]}")
        if len(X) == 0:
            return np.zeros((0, N_CLASSES))
        if self.variant == "knn":
            return _knn_proba(self.train_X, self.train_y, X, self.params.k)
        # trees were grown on float32 inputs; compare at the same precision
        X32 = np.ascontiguousarray(X, dtype=np.float32)
        # small segments often share a descriptor; route each distinct row once
        X32, inverse = np.unique(X32, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        compiled = self._compiled
        if compiled is not None:
            out = np.zeros((len(X32), N_CLASSES))
            for tree, ct in zip(self.trees, compiled):
                c = tree.counts[ct.apply(X32)].astype(float)
                out += c / c.sum(axis=1, keepdims=True)
            return (out / len(self.trees))[inverse]
        return self._traverse(X32.astype(float))[inverse]

    def _traverse(self, X: np.ndarray) -> np.ndarray:
        roots, feat, thr, left, right, dist = self._flat
        n = len(X)
        node = np.repeat(roots[None, :], n, axis=0)
        sample = np.repeat(np.arange(n)[:, None], len(roots), axis=1)
        node, sample = node.ravel(), sample.ravel()
        active = feat[node] >= 0
        while active.any():
            nd = node[active]
            go_left = X[sample[active], feat[nd]] <= thr[nd]
            node[active] = np.where(go_left, left[nd], right[nd])
            active = feat[node] >= 0
        return dist[node].reshape(n, len(roots), N_CLASSES).mean(axis=1)

    def predict_many(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        # argmax returns the first maximum: ties go to the lowest class code
        return np.argmax(proba, axis=1) if len(proba) else np.zeros(0, dtype=np.int64)

    def equals(self, other: "ForestModel") -> bool:
        if (self.variant, self.dim, self.params) != (other.variant, other.dim, other.params):
            return False
        if self.variant == "knn":
            return np.array_equal(self.train_X, other.train_X) and np.array_equal(self.train_y, other.train_y)
        return len(self.trees) == len(other.trees) and all(
            a.equals(b) for a, b in zip(self.trees, other.trees)
        )


def predict(model: ForestModel, f) -> tuple[SemanticClass, np.ndarray]:
    """Class and per-class confidence for one feature vector (or SegmentFeature)."""
    vec = getattr(f, "vector", f)
    proba = model.predict_proba(np.asarray(vec, dtype=float)[None, :])[0]
    return SemanticClass(int(np.argmax(proba))), proba


def _knn_proba(train_X, train_y, X, k, chunk: int = 256) -> np.ndarray:
    k = min(k, len(train_X))
    t_sq = np.einsum("ij,ij->i", train_X, train_X)
    votes = np.zeros((len(X), N_CLASSES))
    for lo in range(0, len(X), chunk):
        q = X[lo:lo + chunk]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] + t_sq[None, :] - 2.0 * q @ train_X.T
        # stable sort keeps training order among equal distances
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
        rows = np.repeat(np.arange(len(q)), k)
        np.add.at(votes[lo:lo + chunk], (rows, train_y[nearest].ravel()), 1.0)
    return votes / k


def _estimator(variant: str, params: ModelParams):
    from sklearn.ensemble import ExtraTreesClassifier, RandomForestClassifier
    from sklearn.tree import DecisionTreeClassifier

    common = dict(criterion="gini", max_depth=params.max_depth, min_samples_leaf=params.min_leaf,
                  random_state=params.seed)
    if variant == "rdf":
        return RandomForestClassifier(n_estimators=params.n_trees, bootstrap=True,
                                      max_features=params.max_features, n_jobs=1, **common)
    if variant == "ert":
        return ExtraTreesClassifier(n_estimators=params.n_trees, bootstrap=False,
                                    max_features=params.max_features, n_jobs=1, **common)
    if variant == "dt":
        return DecisionTreeClassifier(max_features=None, splitter="best", **common)
    raise ValueError(f"unknown variant {variant!r}")


def train(X, y, variant: str = "ert", params: ModelParams = ModelParams()) -> ForestModel:
    """Fit a classifier on feature rows ``X`` with class codes ``y``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise ModelDimensionError("X must be (n, d) with one label per row and n > 0")
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise ValueError("class codes must be in 0..4")
    dim = X.shape[1]
    classes = np.unique(y)
    if variant == "knn":
        return ForestModel("knn", dim, params, (), X.copy(), y.copy())
    if len(classes) < 2:
        warnings.warn(f"single-class training set; model always predicts class {classes[0]}")
        counts = np.bincount(y, minlength=N_CLASSES)
        n = 1 if variant == "dt" else params.n_trees
        return ForestModel(variant, dim, params, tuple(leaf_tree(counts) for _ in range(n)))
    est = _estimator(variant, params).fit(X, y)
    classes = est.classes_.astype(np.int64)
    if variant == "dt":
        return ForestModel(variant, dim, params, (_from_sklearn(est, classes),))
    ests, est.estimators_ = est.estimators_, None
    trees = []
    while ests:
        # drop each fitted tree once converted to bound peak memory
        trees.append(_from_sklearn(ests.pop(0), classes))
    return ForestModel(variant, dim, params, tuple(trees))


def train_features(feats, variant: str = "ert", params: ModelParams = ModelParams()) -> ForestModel:
    from .features import stack

    X, y = stack(feats)
    if np.any(y < 0):
        raise ValueError("every training feature needs a class")
    return train(X, y, variant, params)


def oob_error_curve(X, y, checkpoints: Sequence[int], params: ModelParams = ModelParams()) -> list[float]:
    """RDF out-of-bag error using the first ``t`` trees, for each checkpoint ``t``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    t_max = max(checkpoints)
    est = _estimator("rdf", replace(params, n_trees=t_max)).fit(X, y)
    n = len(X)
    votes = np.zeros((n, len(est.classes_)))
    curve = {}
    for t, (tree, samples) in enumerate(zip(est.estimators_, est.estimators_samples_), start=1):
        oob = np.ones(n, dtype=bool)
        oob[samples] = False
        if oob.any():
            votes[oob] += tree.predict_proba(X[oob])
        if t in checkpoints:
            seen = votes.sum(axis=1) > 0
            pred = est.classes_[np.argmax(votes[seen], axis=1)]
            curve[t] = float(np.mean(pred != y[seen])) if seen.any() else float("nan")
    return [curve[t] for t in checkpoints]


# --- serialization ---------------------------------------------------------

def _fmt_params(p: ModelParams) -> str:
    depth = "none" if p.max_depth is None else str(p.max_depth)
    return (f"params n_trees={p.n_trees} max_depth={depth} min_leaf={p.min_leaf} "
            f"max_features={p.max_features} k={p.k} seed={p.seed}")


def _parse_params(line: str) -> ModelParams:
    parts = line.split()
    if not parts or parts[0] != "params":
        raise ModelFormatError("missing params line")
    kv = dict(p.split("=", 1) for p in parts[1:])
    depth = kv["max_depth"]
    return ModelParams(int(kv["n_trees"]), None if depth == "none" else int(depth),
                       int(kv["min_leaf"]), kv["max_features"], int(kv["k"]), int(kv["seed"]))


def dumps_model(model: ForestModel) -> str:
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION} variant={model.variant} dim={model.dim} "
        f"classes={N_CLASSES} trees={len(model.trees)}",
        _fmt_params(model.params),
    ]
    if model.variant == "knn":
        lines.append(f"knn n={len(model.train_X)}")
        for row, cls in zip(model.train_X, model.train_y):
            lines.append(f"{int(cls)} " + " ".join(repr(float(v)) for v in row))
    for ti, tree in enumerate(model.trees):
        lines.append(f"tree {ti} nodes={tree.n_nodes}")
        for i in range(tree.n_nodes):
            counts = " ".join(str(int(c)) for c in tree.counts[i])
            if tree.feature[i] < 0:
                lines.append(f"L {counts}")
            else:
                lines.append(f"S {int(tree.feature[i])} {float(tree.threshold[i])!r} {counts}")
    return "\n".join(lines) + "\n"


def save_model(model: ForestModel, path) -> None:
    """Write the textual model; a ``.gz`` suffix compresses it."""
    text = dumps_model(model).encode("ascii")
    if str(path).endswith(".gz"):
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as gz:
            gz.write(text)
    else:
        Path(path).write_bytes(text)


def _parse_preorder(lines: list[str], dim: int) -> Tree:
    n = len(lines)
    feature = np.full(n, -1, dtype=np.int64)
    threshold = np.zeros(n)
    counts = np.zeros((n, N_CLASSES), dtype=np.int64)
    for i, line in enumerate(lines):
        parts = line.split()
        if parts[0] == "L" and len(parts) == 1 + N_CLASSES:
            counts[i] = [int(c) for c in parts[1:]]
        elif parts[0] == "S" and len(parts) == 3 + N_CLASSES:
            feature[i] = int(parts[1])
            threshold[i] = float(parts[2])
            counts[i] = [int(c) for c in parts[3:]]
            if not 0 <= feature[i] < dim:
                raise ModelFormatError(f"feature index {feature[i]} out of range")
        else:
            raise ModelFormatError(f"bad node line {line!r}")
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    # rebuild child links from the pre-order sequence
    stack: list[int] = []
    for i in range(n):
        if stack:
            parent = stack[-1]
            if left[parent] < 0:
                left[parent] = i
            else:
                right[parent] = i
                stack.pop()
        if feature[i] >= 0:
            stack.append(i)
    if stack or (n and np.any((feature >= 0) & ((left < 0) | (right < 0)))):
        raise ModelFormatError("truncated tree")
    return Tree(feature, threshold, left, right, counts)


def loads_model(text: str) -> ForestModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ModelFormatError("empty model file")
    head = lines[0].split()
    if len(head) < 2 or head[0] != MODEL_MAGIC:
        raise ModelFormatError("not a model file")
    if head[1] != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {head[1]!r}")
    try:
        kv = dict(p.split("=", 1) for p in head[2:])
        variant, dim, n_trees = kv["variant"], int(kv["dim"]), int(kv["trees"])
        if int(kv["classes"]) != N_CLASSES:
            raise ModelFormatError("class count mismatch")
        params = _parse_params(lines[1])
    except (KeyError, ValueError, IndexError) as exc:
        raise ModelFormatError(f"malformed header: {exc}") from None
    if variant not in VARIANTS:
        raise ModelFormatError(f"unknown variant {variant!r}")
    pos = 2
    train_X = train_y = None
    try:
        if variant == "knn":
            n = int(lines[pos].split("=", 1)[1])
            pos += 1
            rows = [lines[pos + i].split() for i in range(n)]
            pos += n
            train_y = np.array([int(r[0]) for r in rows], dtype=np.int64)
            train_X = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float).reshape(n, dim)
        trees = []
        for _ in range(n_trees):
            parts = lines[pos].split()
            if parts[0] != "tree":
                raise ModelFormatError("expected tree header")
            nodes = int(parts[2].split("=", 1)[1])
            body = lines[pos + 1: pos + 1 + nodes]
            if len(body) != nodes:
                raise ModelFormatError("truncated tree")
            trees.append(_parse_preorder(body, dim))
            pos += 1 + nodes
    except IndexError:
        raise ModelFormatError("truncated model file") from None
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model body: {exc}") from None
    if pos != len(lines):
        raise ModelFormatError("trailing data after model")
    return ForestModel(variant, dim, params, tuple(trees), train_X, train_y)


def load_model(path) -> ForestModel:
    data = Path(path).read_bytes()
    if str(path).endswith(".gz"):
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError):
            raise ModelFormatError("truncated or corrupt compressed model") from None
    return loads_model(data.decode("ascii"))
