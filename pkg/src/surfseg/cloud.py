"""Structured spherical point clouds, coordinate conversion and file I/O.

A cloud from one spin of a spinning Lidar is a 2D grid: one row per
vertical sensor (row 0 is the topmost beam, rows run top to bottom) and one
column per horizontal shot (phi ascending). Cartesian convention::

    x = r cos(theta) cos(phi)
    y = r cos(theta) sin(phi)
    z = r sin(theta)
"""

from __future__ import annotations

import enum
import gzip
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Optional, Sequence

import numpy as np

R_MIN = 0.9
R_MAX = 70.0
TWO_PI = 2.0 * math.pi

CLOUD_MAGIC = "SLCLOUD"
CLOUD_VERSION = "v1"


class CloudFormatError(ValueError):
    """Raised when a cloud file cannot be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidPointError(ValueError):
    pass


class SemanticClass(enum.IntEnum):
    PLANE = 0
    GROUND_PLANE = 1
    CYLINDER = 2
    SPHERE = 3
    CONE = 4


N_CLASSES = len(SemanticClass)

CLASS_NAMES = {
    SemanticClass.PLANE: "plane",
    SemanticClass.GROUND_PLANE: "ground_plane",
    SemanticClass.CYLINDER: "cylinder",
    SemanticClass.SPHERE: "sphere",
    SemanticClass.CONE: "cone",
}

CLASS_COLORS = {
    SemanticClass.PLANE: (255, 0, 0),
    SemanticClass.GROUND_PLANE: (245, 245, 240),
    SemanticClass.CYLINDER: (0, 0, 255),
    SemanticClass.SPHERE: (0, 128, 0),
    SemanticClass.CONE: (128, 128, 128),
}


@dataclass(frozen=True)
class SphericalPoint:
    theta: float
    phi: float
    r: float
    valid: bool = True


@dataclass(frozen=True)
class CartesianPoint:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def spherical_to_cartesian(p: SphericalPoint) -> CartesianPoint:
    if not p.valid:
        raise InvalidPointError("invalid-point")
    ct = math.cos(p.theta)
    return CartesianPoint(
        p.r * ct * math.cos(p.phi), p.r * ct * math.sin(p.phi), p.r * math.sin(p.theta)
    )


def cartesian_to_spherical(c: CartesianPoint) -> SphericalPoint:
    r = math.sqrt(c.x * c.x + c.y * c.y + c.z * c.z)
    if r == 0.0:
        raise InvalidPointError("invalid-point")
    theta = math.asin(max(-1.0, min(1.0, c.z / r)))
    phi = math.atan2(c.y, c.x) % TWO_PI
    return SphericalPoint(theta, phi, r, True)


def to_cartesian(theta, phi, r) -> np.ndarray:
    """Vectorised conversion; broadcasts its arguments and stacks x, y, z last."""
    theta, phi, r = np.broadcast_arrays(
        np.asarray(theta, float), np.asarray(phi, float), np.asarray(r, float)
    )
    ct = np.cos(theta)
    return np.stack([r * ct * np.cos(phi), r * ct * np.sin(phi), r * np.sin(theta)], axis=-1)


@dataclass(frozen=True, eq=False)
class StructuredCloud:
    """One spin as a rows x cols grid.

    ``theta`` has one entry per row, ``phi`` one entry per column; ``r`` and
    ``valid`` are (rows, cols). Ground truth arrays are optional and share the
    grid shape. Treated as immutable; arrays are flagged read-only.
    """

    theta: np.ndarray
    phi: np.ndarray
    r: np.ndarray
    valid: np.ndarray
    gt_class: Optional[np.ndarray] = None
    gt_instance: Optional[np.ndarray] = None

    def __post_init__(self):
        rows, cols = len(self.theta), len(self.phi)
        coerce = {
            "theta": np.asarray(self.theta, dtype=np.float64),
            "phi": np.asarray(self.phi, dtype=np.float64),
            "r": np.asarray(self.r, dtype=np.float64),
            "valid": np.asarray(self.valid, dtype=bool),
        }
        if self.gt_class is not None:
            coerce["gt_class"] = np.asarray(self.gt_class, dtype=np.int8)
        if self.gt_instance is not None:
            coerce["gt_instance"] = np.asarray(self.gt_instance, dtype=np.int32)
        if (self.gt_class is None) != (self.gt_instance is None):
            raise ValueError("gt_class and gt_instance must be given together")
        for name, arr in coerce.items():
            if name not in ("theta", "phi") and arr.shape != (rows, cols):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(rows, cols)}")
            arr = arr.copy() if arr.flags.writeable else arr
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.gt_class is not None:
            gc = self.gt_class
            if gc.size and (gc.min() < 0 or gc.max() >= N_CLASSES):
                raise ValueError("gt_class codes must be in 0..4")

    @property
    def rows(self) -> int:
        return len(self.theta)

    @property
    def cols(self) -> int:
        return len(self.phi)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def has_gt(self) -> bool:
        return self.gt_class is not None

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def point(self, row: int, col: int) -> SphericalPoint:
        return SphericalPoint(
            float(self.theta[row]), float(self.phi[col]), float(self.r[row, col]),
            bool(self.valid[row, col]),
        )

    def xyz(self) -> np.ndarray:
        """(rows, cols, 3) Cartesian positions; invalid cells are computed too."""
        return to_cartesian(self.theta[:, None], self.phi[None, :], self.r)

    def equals(self, other: "StructuredCloud", rtol: float = 0.0) -> bool:
        """Field-wise equality; ``rtol`` loosens the float fields (e.g. 1e-8
        for a cloud read back from the 9-digit text format)."""
        if self.shape != other.shape or self.has_gt != other.has_gt:
            return False
        close = (lambda a, b: np.allclose(a, b, rtol=rtol, atol=0.0)) if rtol else np.array_equal
        same = (
            close(self.theta, other.theta)
            and close(self.phi, other.phi)
            and close(self.r, other.r)
            and np.array_equal(self.valid, other.valid)
        )
        if same and self.has_gt:
            same = np.array_equal(self.gt_class, other.gt_class) and np.array_equal(
                self.gt_instance, other.gt_instance
            )
        return bool(same)


def range_gate(r: np.ndarray, r_min: float = R_MIN, r_max: float = R_MAX) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return np.isfinite(r) & (r >= r_min) & (r <= r_max)


def _open_text(path: Path, mode: str) -> IO[str]:
    if str(path).endswith(".gz"):
        # mtime=0 keeps compressed output byte-stable
        raw = open(path, mode.replace("t", "") + "b")
        if "w" in mode:
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
        else:
            gz = gzip.GzipFile(fileobj=raw, mode="rb")
        return _ClosingTextWrapper(gz, raw)
    return open(path, mode, encoding="ascii", newline="\n")


class _ClosingTextWrapper(io.TextIOWrapper):
    def __init__(self, gz, raw):
        super().__init__(gz, encoding="ascii", newline="\n")
        self._raw = raw

    def close(self):
        try:
            super().close()
        finally:
            self._raw.close()


def save_cloud(cloud: StructuredCloud, path) -> None:
    """Write ``cloud`` in the line-oriented SLCLOUD v1 format (``.gz`` compresses)."""
    path = Path(path)
    rows, cols = cloud.shape
    has_gt = 1 if cloud.has_gt else 0
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    th = np.repeat(cloud.theta, cols)
    ph = np.tile(cloud.phi, rows)
    fields = [
        rr.ravel().astype(str),
        cc.ravel().astype(str),
        np.char.mod("%.9g", th),
        np.char.mod("%.9g", ph),
        np.char.mod("%.9g", cloud.r.ravel()),
        cloud.valid.ravel().astype(np.int8).astype(str),
    ]
    if has_gt:
        fields.append(cloud.gt_class.ravel().astype(str))
        fields.append(cloud.gt_instance.ravel().astype(str))
    lines = fields[0]
    for f in fields[1:]:
        lines = np.char.add(np.char.add(lines, " "), f)
    with _open_text(path, "wt") as fh:
        fh.write(f"{CLOUD_MAGIC} {CLOUD_VERSION} rows={rows} cols={cols} has_gt={has_gt}\n")
        if lines.size:
            fh.write("\n".join(lines.tolist()))
            fh.write("\n")


def _parse_header(line: str, lineno: int) -> tuple[int, int, bool]:
    parts = line.split()
    if len(parts) != 5 or parts[0] != CLOUD_MAGIC:
        raise CloudFormatError("malformed header", lineno)
    if parts[1] != CLOUD_VERSION:
        raise CloudFormatError(f"unsupported version {parts[1]!r}", lineno)
    kv = {}
    for item in parts[2:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise CloudFormatError(f"malformed header field {item!r}", lineno)
        kv[key] = value
    try:
        rows, cols, has_gt = int(kv["rows"]), int(kv["cols"]), int(kv["has_gt"])
    except (KeyError, ValueError):
        raise CloudFormatError("malformed header", lineno) from None
    if rows < 0 or cols < 0 or has_gt not in (0, 1):
        raise CloudFormatError("malformed header", lineno)
    return rows, cols, bool(has_gt)


def _strip_comment(line: str) -> str:
    i = line.find("#")
    return (line if i < 0 else line[:i]).strip()


def load_cloud(path) -> StructuredCloud:
    """Parse an SLCLOUD v1 file; errors carry the offending line number."""
    with _open_text(Path(path), "rt") as fh:
        return read_cloud(fh)


def read_cloud(fh: IO[str]) -> StructuredCloud:
    header = None
    records: list[tuple[int, str]] = []
    for lineno, raw in enumerate(fh, start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if header is None:
            header = _parse_header(line, lineno)
        else:
            records.append((lineno, line))
    if header is None:
        raise CloudFormatError("missing header", 1)
    rows, cols, has_gt = header
    n_fields = 8 if has_gt else 6
    expected = rows * cols
    if len(records) != expected:
        last = records[-1][0] if records else 1
        raise CloudFormatError(
            f"expected {expected} cell lines for {rows}x{cols}, found {len(records)}", last
        )

    theta = np.zeros(rows)
    phi = np.zeros(cols)
    r = np.zeros((rows, cols))
    valid = np.zeros((rows, cols), dtype=bool)
    gt_class = np.zeros((rows, cols), dtype=np.int8) if has_gt else None
    gt_instance = np.zeros((rows, cols), dtype=np.int32) if has_gt else None

    for k, (lineno, line) in enumerate(records):
        parts = line.split()
        if len(parts) != n_fields:
            raise CloudFormatError(f"expected {n_fields} fields, got {len(parts)}", lineno)
        try:
            row, col = int(parts[0]), int(parts[1])
            th, ph, rng = float(parts[2]), float(parts[3]), float(parts[4])
            v = int(parts[5])
        except ValueError:
            raise CloudFormatError("unparsable field", lineno) from None
        want_row, want_col = divmod(k, cols)
        if (row, col) != (want_row, want_col):
            raise CloudFormatError(
                f"cell ({row}, {col}) out of row-major order, expected ({want_row}, {want_col})",
                lineno,
            )
        if v not in (0, 1):
            raise CloudFormatError(f"validity flag must be 0 or 1, got {v}", lineno)
        if col == 0:
            theta[row] = th
        elif th != theta[row]:
            raise CloudFormatError("theta varies along a row", lineno)
        if row == 0:
            phi[col] = ph
        elif ph != phi[col]:
            raise CloudFormatError("phi varies along a column", lineno)
        r[row, col] = rng
        valid[row, col] = bool(v)
        if has_gt:
            try:
                cls, inst = int(parts[6]), int(parts[7])
            except ValueError:
                raise CloudFormatError("unparsable ground truth", lineno) from None
            if not 0 <= cls < N_CLASSES:
                raise CloudFormatError(f"class code {cls} out of range 0-4", lineno)
            gt_class[row, col] = cls
            gt_instance[row, col] = inst

    return StructuredCloud(theta, phi, r, valid, gt_class, gt_instance)


def export_ply(cloud: StructuredCloud, classes, path) -> int:
    """Write valid points as an ASCII PLY coloured by semantic class.

    ``classes`` is a (rows, cols) array of class codes; only valid cells are
    read. Returns the number of vertices written.
    """
    classes = np.asarray(classes)
    if classes.shape != cloud.shape:
        raise ValueError(f"classes shape {classes.shape} does not match cloud {cloud.shape}")
    mask = cloud.valid
    pts = cloud.xyz()[mask]
    codes = classes[mask].astype(int)
    if codes.size and (codes.min() < 0 or codes.max() >= N_CLASSES):
        raise ValueError("class codes must be in 0..4 for every valid point")
    palette = np.array([CLASS_COLORS[c] for c in SemanticClass], dtype=np.int64)
    rgb = palette[codes] if codes.size else np.zeros((0, 3), dtype=np.int64)
    header = (
        "ply\n"
        "format ascii 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(header)
        for (x, y, z), (cr, cg, cb) in zip(pts.tolist(), rgb.tolist()):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {cr} {cg} {cb}\n")
    return len(pts)


def cells_to_points(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Flatten per-cell values to the valid-point order used by metrics and PLY."""
    return np.asarray(values)[np.asarray(valid, bool)]


def make_cloud(
    theta: Sequence[float],
    phi: Sequence[float],
    r,
    valid=None,
    gt_class=None,
    gt_instance=None,
    r_min: float = R_MIN,
    r_max: float = R_MAX,
) -> StructuredCloud:
    """Build a cloud, deriving validity from the range gate when not given."""
    r = np.asarray(r, dtype=float)
    if valid is None:
        valid = range_gate(r, r_min, r_max)
    return StructuredCloud(np.asarray(theta, float), np.asarray(phi, float), r, valid,
                           gt_class, gt_instance)
