"""Online mesh over a horizontally subsampled spin.

Links (column index taken modulo the number of sampled columns, so the last
shot closes the cylinder onto the first):

1. (i, j) - (i+1, j), (i+1, j+1), (i, j+1) for every row above the bottom one
2. (n, j) - (n, j+1) along the bottom row
3. the wraparound versions of 1 and 2 for the last column

A link is only made when both ends are valid. Every point keeps its
neighbours in the fixed anticlockwise slot order below; missing neighbours
are dropped without disturbing the order of the survivors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .cloud import StructuredCloud

# (d_row, d_col) for each neighbour slot, in storage order
SLOT_OFFSETS = ((1, 0), (1, 1), (0, 1), (-1, 0), (-1, -1), (0, -1))
MAX_DEGREE = 6


@dataclass(frozen=True, eq=False)
class SubsampledCloud:
    """Every ``k_interval``-th column of ``parent``, starting at column 0."""

    parent: StructuredCloud
    k_interval: int

    def __post_init__(self):
        cols = np.arange(0, self.parent.cols, self.k_interval)
        object.__setattr__(self, "col_index", cols)

    @property
    def rows(self) -> int:
        return self.parent.rows

    @property
    def cols(self) -> int:
        return len(self.col_index)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def theta(self) -> np.ndarray:
        return self.parent.theta

    @property
    def phi(self) -> np.ndarray:
        return self.parent.phi[self.col_index]

    @property
    def r(self) -> np.ndarray:
        return self.parent.r[:, self.col_index]

    @property
    def valid(self) -> np.ndarray:
        return self.parent.valid[:, self.col_index]

    @property
    def gt_class(self) -> Optional[np.ndarray]:
        gc = self.parent.gt_class
        return None if gc is None else gc[:, self.col_index]

    @property
    def gt_instance(self) -> Optional[np.ndarray]:
        gi = self.parent.gt_instance
        return None if gi is None else gi[:, self.col_index]

    def xyz(self) -> np.ndarray:
        from .cloud import to_cartesian

        return to_cartesian(self.theta[:, None], self.phi[None, :], self.r)


def subsample(cloud: StructuredCloud, k_interval: int) -> SubsampledCloud:
    if int(k_interval) != k_interval or k_interval < 1:
        raise ValueError(f"k_interval must be a positive integer, got {k_interval!r}")
    return SubsampledCloud(cloud, int(k_interval))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Ordered adjacency over a rows x cols grid, indexed by ``row * cols + col``.

    ``neighbors[p, :degree[p]]`` holds p's neighbours in slot order; the rest
    of the row is -1.
    """

    rows: int
    cols: int
    neighbors: np.ndarray
    degree: np.ndarray

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def cell(self, idx: int) -> tuple[int, int]:
        return divmod(int(idx), self.cols)

    def neighbors_of(self, idx: int) -> list[int]:
        return self.neighbors[idx, : self.degree[idx]].tolist()

    def links(self) -> set[tuple[int, int]]:
        """Undirected link set as (low, high) index pairs."""
        p = np.repeat(np.arange(self.size), MAX_DEGREE).reshape(self.size, MAX_DEGREE)
        mask = self.neighbors >= 0
        a, b = p[mask], self.neighbors[mask]
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return set(zip(lo.tolist(), hi.tolist()))

    def as_dict(self) -> dict[int, list[int]]:
        return {i: self.neighbors_of(i) for i in range(self.size) if self.degree[i]}

    def equals(self, other: "Mesh") -> bool:
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and np.array_equal(self.neighbors, other.neighbors)
            and np.array_equal(self.degree, other.degree)
        )


def _compact(cand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    missing = cand < 0
    order = np.argsort(missing, axis=1, kind="stable")
    out = np.take_along_axis(cand, order, axis=1)
    return out, (~missing).sum(axis=1)


def _dedupe(cand: np.ndarray) -> np.ndarray:
    return _dedupe_rows(cand, np.arange(cand.shape[0]))


def _dedupe_rows(cand: np.ndarray, own: np.ndarray) -> np.ndarray:
    # only reachable with <= 2 columns, where wrapped slots alias each other
    cand = cand.copy()
    for p in range(cand.shape[0]):
        seen = {int(own[p])}
        for s in range(MAX_DEGREE):
            q = cand[p, s]
            if q < 0:
                continue
            if q in seen:
                cand[p, s] = -1
            else:
                seen.add(q)
    return cand


def mesh_from_valid(valid: np.ndarray) -> Mesh:
    """Vectorised construction from a (rows, cols) validity grid."""
    valid = np.asarray(valid, dtype=bool)
    rows, cols = valid.shape
    n = rows * cols
    if n == 0:
        return Mesh(rows, cols, np.full((0, MAX_DEGREE), -1, np.int32), np.zeros(0, np.int32))
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    cand = np.full((rows, cols, MAX_DEGREE), -1, dtype=np.int64)
    for s, (di, dj) in enumerate(SLOT_OFFSETS):
        ni = ii + di
        nj = (jj + dj) % cols
        inside = (ni >= 0) & (ni < rows)
        nic = np.clip(ni, 0, rows - 1)
        ok = inside & valid & valid[nic, nj]
        cand[..., s] = np.where(ok, nic * cols + nj, -1)
    cand = cand.reshape(n, MAX_DEGREE)
    if cols <= 2:
        cand = _dedupe(cand)
    nbrs, deg = _compact(cand)
    return Mesh(rows, cols, nbrs.astype(np.int32), deg.astype(np.int32))


def build_mesh(sub: SubsampledCloud) -> Mesh:
    return mesh_from_valid(sub.valid)


class MeshBuilder:
    """Column-at-a-time mesh construction with a three-column buffer.

    Push the validity of each sampled column as it arrives. Once column
    ``j + 1`` is in, column ``j``'s neighbour lists are final and ``push``
    returns ``[j]`` (column 0 waits for the wraparound). ``finish`` closes
    the cylinder and returns the complete mesh.
    """

    def __init__(self, rows: int):
        self.rows = rows
        self._n = 0
        self._buf: dict[int, np.ndarray] = {}
        self._head: dict[int, np.ndarray] = {}
        self._rows_of: dict[int, tuple[np.ndarray, int, int]] = {}

    @property
    def n_columns(self) -> int:
        return self._n

    def _valid(self, c: int) -> np.ndarray:
        return self._buf[c] if c in self._buf else self._head[c]

    def push(self, valid_col) -> list[int]:
        col = np.asarray(valid_col, dtype=bool)
        if col.shape != (self.rows,):
            raise ValueError(f"column must have {self.rows} entries")
        j = self._n
        self._n += 1
        self._buf[j] = col
        if j < 2:
            # the first two columns are needed again when the spin closes
            self._head[j] = col
        done = []
        if j >= 2:
            self._rows_of[j - 1] = (self._slots(j - 1, j - 2, j), j - 2, j)
            done.append(j - 1)
        self._buf.pop(j - 3, None)
        return done

    def _slots(self, c: int, left: int, right: int) -> np.ndarray:
        """Neighbour row per slot for column ``c`` (-1 = no link)."""
        rows = self.rows
        here = self._valid(c)
        out = np.full((rows, MAX_DEGREE), -1, dtype=np.int64)
        i = np.arange(rows)
        for s, (di, dj) in enumerate(SLOT_OFFSETS):
            other = self._valid(right if dj == 1 else left if dj == -1 else c)
            ni = i + di
            inside = (ni >= 0) & (ni < rows)
            nic = np.clip(ni, 0, rows - 1)
            out[:, s] = np.where(inside & here & other[nic], ni, -1)
        return out

    def column_cells(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        """Final neighbours of column ``c`` as (rows, 6, 2) (row, col) cells.

        Compacted in slot order with -1 padding, plus the per-row degree.
        Only available once ``push``/``finish`` has reported ``c`` as done.
        """
        slots, left, right = self._rows_of[c]
        cells = np.full(slots.shape + (2,), -1, dtype=np.int64)
        for s, (_, dj) in enumerate(SLOT_OFFSETS):
            nc = right if dj == 1 else left if dj == -1 else c
            ok = slots[:, s] >= 0
            cells[ok, s, 0] = slots[ok, s]
            cells[ok, s, 1] = nc
        if self._n <= 2:
            # aliasing wrap slots; rebuild through the flat path
            flat = np.where(cells[..., 0] >= 0, cells[..., 0] * self._n + cells[..., 1], -1)
            own = np.arange(self.rows) * self._n + c
            flat = _dedupe_rows(flat, own)
            cells[flat < 0] = -1
        order = np.argsort(cells[..., 0] < 0, axis=1, kind="stable")
        cells = np.take_along_axis(cells, order[..., None], axis=1)
        return cells, (cells[..., 0] >= 0).sum(axis=1)

    def finish(self) -> Mesh:
        cols, rows = self._n, self.rows
        if cols == 0:
            return mesh_from_valid(np.zeros((rows, 0), dtype=bool))
        for c in sorted({0, cols - 1}):
            left, right = (c - 1) % cols, (c + 1) % cols
            self._rows_of[c] = (self._slots(c, left, right), left, right)
        cand = np.full((rows * cols, MAX_DEGREE), -1, dtype=np.int64)
        base = np.arange(rows) * cols
        for c, (slots, left, right) in self._rows_of.items():
            for s, (_, dj) in enumerate(SLOT_OFFSETS):
                nc = right if dj == 1 else left if dj == -1 else c
                cand[base + c, s] = np.where(slots[:, s] >= 0, slots[:, s] * cols + nc, -1)
        if cols <= 2:
            cand = _dedupe(cand)
        nbrs, deg = _compact(cand)
        return Mesh(rows, cols, nbrs.astype(np.int32), deg.astype(np.int32))


def stream_columns(sub: SubsampledCloud) -> Iterator[np.ndarray]:
    valid = sub.valid
    for j in range(sub.cols):
        yield valid[:, j]
