"""Surface normals from ordered mesh neighbours.

Each consecutive pair of neighbour vectors (plus the pair closing the ring)
gives a candidate ``C = A x B`` weighted by ``1 / max(|A|, |B|)``. The
normal is the weighted mean of the raw candidates, scaled to unit length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .mesh import MAX_DEGREE, Mesh, MeshBuilder, SubsampledCloud

_DEGENERATE = 1e-12


class NoNormalError(ValueError):
    """Raised for points with fewer than two neighbours."""


class DegenerateNormalError(ValueError):
    """Raised when the candidates cancel or carry no weight."""


@dataclass(frozen=True, eq=False)
class NormalMap:
    """Unit normals over a grid; ``has_normal`` flags which cells carry one."""

    normals: np.ndarray  # (n, 3), NaN where absent
    has_normal: np.ndarray  # (n,) bool

    def __len__(self) -> int:
        return int(self.has_normal.sum())

    def __contains__(self, idx) -> bool:
        return bool(self.has_normal[idx])

    def __getitem__(self, idx) -> np.ndarray:
        if not self.has_normal[idx]:
            raise KeyError(idx)
        return self.normals[idx]

    def items(self):
        for i in np.flatnonzero(self.has_normal):
            yield int(i), self.normals[i]

    def equals(self, other: "NormalMap") -> bool:
        return np.array_equal(self.has_normal, other.has_normal) and np.array_equal(
            self.normals[self.has_normal], other.normals[other.has_normal]
        )


def pair_schedule(k: int) -> list[tuple[int, int]]:
    """Neighbour-slot pairs used for a point with ``k`` neighbours.

    Consecutive pairs then the closing pair ``(k-1, 0)``. With two neighbours
    the closing pair is the first pair reversed and would cancel it exactly,
    so only one candidate is formed.
    """
    if k < 2:
        return []
    if k == 2:
        return [(0, 1)]
    return [(t, t + 1) for t in range(k - 1)] + [(k - 1, 0)]


def candidates(p: np.ndarray, nbr_pos: np.ndarray) -> list[tuple[np.ndarray, float]]:
    """(candidate normal, weight) pairs for a point and its ordered neighbours."""
    out = []
    for a, b in pair_schedule(len(nbr_pos)):
        va = nbr_pos[a] - p
        vb = nbr_pos[b] - p
        la, lb = np.linalg.norm(va), np.linalg.norm(vb)
        m = max(la, lb)
        w = 1.0 / m if m > 0 else 0.0
        out.append((np.cross(va, vb), w))
    return out


def estimate_normal(p: int, mesh: Mesh, positions: np.ndarray) -> np.ndarray:
    """Unit normal at grid index ``p``; ``positions`` is (n, 3)."""
    nbrs = mesh.neighbors_of(p)
    if len(nbrs) < 2:
        raise NoNormalError("no-normal")
    cands = candidates(positions[p], positions[nbrs])
    sum_w = sum(w for _, w in cands)
    if sum_w <= 0:
        raise DegenerateNormalError("degenerate-normal")
    acc = np.zeros(3)
    for c, w in cands:
        acc += c * w
    mean = acc / sum_w
    norm = np.linalg.norm(mean)
    if not np.isfinite(norm) or norm <= _DEGENERATE:
        raise DegenerateNormalError("degenerate-normal")
    return mean / norm


def _kernel(p: np.ndarray, nbr_pos: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised normals: ``p`` (n, 3), ``nbr_pos`` (n, 6, 3) compacted, ``k`` (n,)."""
    n = len(p)
    sum_c = np.zeros((n, 3))
    sum_w = np.zeros(n)
    rows = np.arange(n)
    for t in range(MAX_DEGREE):
        use = ((k >= 3) & (t < k)) | ((k == 2) & (t == 0))
        if not use.any():
            continue
        nxt = np.where(t + 1 < k, t + 1, 0)
        va = nbr_pos[:, t] - p
        vb = nbr_pos[rows, nxt] - p
        m = np.maximum(np.linalg.norm(va, axis=1), np.linalg.norm(vb, axis=1))
        w = np.where(use & (m > 0), 1.0 / np.where(m > 0, m, 1.0), 0.0)
        c = np.cross(va, vb)
        sum_c += np.where(use[:, None], c, 0.0) * w[:, None]
        sum_w += w
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sum_c / sum_w[:, None]
    norm = np.linalg.norm(mean, axis=1)
    ok = (k >= 2) & (sum_w > 0) & np.isfinite(norm) & (norm > _DEGENERATE)
    out = np.full((n, 3), np.nan)
    out[ok] = mean[ok] / norm[ok, None]
    return out, ok


def _batch(mesh: Mesh, positions: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nb = mesh.neighbors[idx].astype(np.int64)
    nbr_pos = positions[np.maximum(nb, 0)]
    return _kernel(positions[idx], nbr_pos, mesh.degree[idx].astype(np.int64))


def estimate_normals(mesh: Mesh, sub_or_positions) -> NormalMap:
    """Normals for every mesh point with at least two neighbours."""
    positions = _positions(sub_or_positions)
    idx = np.arange(mesh.size)
    normals, ok = _batch(mesh, positions, idx)
    return NormalMap(normals, ok)


def _positions(sub_or_positions) -> np.ndarray:
    if isinstance(sub_or_positions, SubsampledCloud):
        return sub_or_positions.xyz().reshape(-1, 3)
    return np.asarray(sub_or_positions, dtype=float).reshape(-1, 3)


def normals_for(mesh: Mesh, positions: np.ndarray, idx: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
    """Normals for selected indices only (used when columns finalise early)."""
    idx = np.asarray(list(idx), dtype=np.int64)
    return _batch(mesh, positions, idx)


def pipelined_normals(sub: SubsampledCloud) -> tuple[Mesh, NormalMap]:
    """Stream columns through ``MeshBuilder``, computing each column's normals
    as soon as the builder reports its neighbour lists final.

    Positions of a column are only read once that column has arrived.
    """
    rows, cols = sub.shape
    grid = sub.xyz()
    builder = MeshBuilder(rows)
    normals = np.full((rows, cols, 3), np.nan)
    has = np.zeros((rows, cols), dtype=bool)
    valid = sub.valid

    def emit(c: int) -> None:
        cells, k = builder.column_cells(c)
        nbr_pos = grid[np.maximum(cells[..., 0], 0), np.maximum(cells[..., 1], 0)]
        n, ok = _kernel(grid[:, c], nbr_pos, k)
        normals[:, c] = n
        has[:, c] = ok

    for j in range(cols):
        for c in builder.push(valid[:, j]):
            emit(c)
    mesh = builder.finish()
    for c in sorted({0, cols - 1}) if cols else ():
        emit(c)
    return mesh, NormalMap(normals.reshape(-1, 3), has.ravel())
