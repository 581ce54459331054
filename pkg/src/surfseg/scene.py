"""Synthetic spinning-Lidar scanner over parametric scenes.

Shapes are placed with a pose (position plus roll/pitch/yaw in radians,
applied as extrinsic x-y-z rotations). In its local frame each primitive is:

* plane: rectangle in the local xy plane, half-extents ``(hx, hy)``
* ground plane: infinite plane ``z = position.z`` (orientation ignored)
* sphere: centred at the origin, ``radius``
* cylinder: open tube around the local z axis, ``0 <= z <= height``
* cone: open lateral surface, base circle of ``radius`` at z=0, apex at
  ``z = height``

Rays are cast against every shape at once; the nearest hit wins.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .cloud import (
    R_MAX,
    R_MIN,
    TWO_PI,
    CartesianPoint,
    SemanticClass,
    StructuredCloud,
    load_cloud,
    save_cloud,
)

log = logging.getLogger(__name__)

_EPS = 1e-9

PARAM_COUNT = {
    SemanticClass.PLANE: 2,
    SemanticClass.GROUND_PLANE: 0,
    SemanticClass.SPHERE: 1,
    SemanticClass.CYLINDER: 2,
    SemanticClass.CONE: 2,
}

KIND_NAMES = {
    "plane": SemanticClass.PLANE,
    "ground": SemanticClass.GROUND_PLANE,
    "ground_plane": SemanticClass.GROUND_PLANE,
    "sphere": SemanticClass.SPHERE,
    "cylinder": SemanticClass.CYLINDER,
    "cone": SemanticClass.CONE,
}
_KIND_WRITE = {
    SemanticClass.PLANE: "plane",
    SemanticClass.GROUND_PLANE: "ground",
    SemanticClass.SPHERE: "sphere",
    SemanticClass.CYLINDER: "cylinder",
    SemanticClass.CONE: "cone",
}


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    kind: SemanticClass
    instance_id: int
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    params: tuple[float, ...] = ()

    def validate(self) -> None:
        need = PARAM_COUNT[self.kind]
        if len(self.params) != need:
            raise SceneError(f"{self.kind.name} needs {need} size parameters, got {len(self.params)}")
        if any(not (p > 0 and math.isfinite(p)) for p in self.params):
            raise SceneError(f"{self.kind.name} size parameters must be > 0: {self.params}")

    def rotation(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.orientation).as_matrix()


@dataclass(frozen=True)
class LidarSpec:
    n_beams: int = 32
    vertical_fov: tuple[float, float] = (math.radians(-30.67), math.radians(10.67))
    horizontal_step: float = math.radians(0.2)
    r_min: float = R_MIN
    r_max: float = R_MAX
    noise_sigma: float = 0.1
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def n_cols(self) -> int:
        return int(round(TWO_PI / self.horizontal_step))

    def thetas(self) -> np.ndarray:
        """Beam elevations, topmost first."""
        lo, hi = self.vertical_fov
        return np.linspace(hi, lo, self.n_beams)

    def phis(self) -> np.ndarray:
        return np.arange(self.n_cols) * self.horizontal_step

    def validate(self) -> None:
        if self.n_beams < 2:
            raise SceneError("n_beams must be >= 2")
        if not self.horizontal_step > 0:
            raise SceneError("horizontal_step must be > 0")
        if abs(self.n_cols * self.horizontal_step - TWO_PI) > self.horizontal_step:
            raise SceneError("horizontal_step must divide 2*pi to within one shot")
        if self.noise_sigma < 0:
            raise SceneError("noise_sigma must be >= 0")
        if not 0 < self.r_min < self.r_max:
            raise SceneError("need 0 < r_min < r_max")
        lo, hi = self.vertical_fov
        if not -math.pi / 2 <= lo < hi <= math.pi / 2:
            raise SceneError("vertical_fov must be an increasing pair within [-pi/2, pi/2]")


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[ShapeSpec, ...] = ()
    lidar: LidarSpec = field(default_factory=LidarSpec)
    seed: int = 0

    def validate(self) -> None:
        self.lidar.validate()
        ids = [s.instance_id for s in self.shapes]
        if len(ids) != len(set(ids)):
            raise SceneError("instance ids must be unique")
        if sum(s.kind == SemanticClass.GROUND_PLANE for s in self.shapes) > 1:
            raise SceneError("at most one ground plane per scene")
        for s in self.shapes:
            s.validate()


def _as_vec(p) -> np.ndarray:
    if isinstance(p, CartesianPoint):
        return p.as_array()
    return np.asarray(p, dtype=float)


def _smallest_positive(ts: Sequence[np.ndarray], oks: Sequence[np.ndarray]) -> np.ndarray:
    out = np.full(np.shape(ts[0]), np.inf)
    for t, ok in zip(ts, oks):
        ok = ok & (t > _EPS)
        out = np.where(ok & (t < out), t, out)
    return out


def _quadratic_roots(a, b, c):
    """Real roots of a t^2 + b t + c; NaN where none exist."""
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        # numerically stable form
        q = -0.5 * (b + np.copysign(sq, b))
        t1 = q / a
        t2 = c / q
    linear = np.abs(a) < 1e-12
    if np.any(linear):
        with np.errstate(invalid="ignore", divide="ignore"):
            tl = -c / b
        t1 = np.where(linear, tl, t1)
        t2 = np.where(linear, np.nan, t2)
    return t1, t2


def intersect_many(origins: np.ndarray, dirs: np.ndarray, shape: ShapeSpec) -> np.ndarray:
    """Distance to the nearest hit along each ray (inf on a miss).

    ``origins`` and ``dirs`` are (N, 3) or broadcastable; dirs are unit length.
    """
    o = np.asarray(origins, dtype=float)
    d = np.asarray(dirs, dtype=float)
    o, d = np.broadcast_arrays(o, d)
    if shape.kind == SemanticClass.GROUND_PLANE:
        z0 = shape.position[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (z0 - o[..., 2]) / d[..., 2]
        ok = np.isfinite(t)
        return _smallest_positive([t], [ok])

    rot = shape.rotation()
    # world -> local: R^T (p - c)
    lo = (o - np.asarray(shape.position)) @ rot
    ld = d @ rot
    ox, oy, oz = lo[..., 0], lo[..., 1], lo[..., 2]
    dx, dy, dz = ld[..., 0], ld[..., 1], ld[..., 2]

    if shape.kind == SemanticClass.PLANE:
        hx, hy = shape.params
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -oz / dz
        ok = np.isfinite(t)
        px, py = ox + t * dx, oy + t * dy
        ok &= (np.abs(px) <= hx) & (np.abs(py) <= hy)
        return _smallest_positive([t], [ok])

    if shape.kind == SemanticClass.SPHERE:
        (rad,) = shape.params
        a = np.ones_like(ox)
        b = 2 * (ox * dx + oy * dy + oz * dz)
        c = ox * ox + oy * oy + oz * oz - rad * rad
        t1, t2 = _quadratic_roots(a, b, c)
        return _smallest_positive([t1, t2], [np.isfinite(t1), np.isfinite(t2)])

    if shape.kind == SemanticClass.CYLINDER:
        rad, height = shape.params
        a = dx * dx + dy * dy
        b = 2 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - rad * rad
        with np.errstate(invalid="ignore", divide="ignore"):
            t1, t2 = _quadratic_roots(np.where(a < 1e-15, np.nan, a), b, c)
        oks = []
        for t in (t1, t2):
            z = oz + t * dz
            oks.append(np.isfinite(t) & (z >= 0) & (z <= height))
        return _smallest_positive([t1, t2], oks)

    if shape.kind == SemanticClass.CONE:
        rad, height = shape.params
        k = rad / height
        # x^2 + y^2 = k^2 (h - z)^2 with 0 <= z <= h
        w0 = height - oz
        a = dx * dx + dy * dy - k * k * dz * dz
        b = 2 * (ox * dx + oy * dy + k * k * w0 * dz)
        c = ox * ox + oy * oy - k * k * w0 * w0
        t1, t2 = _quadratic_roots(a, b, c)
        oks = []
        for t in (t1, t2):
            z = oz + t * dz
            oks.append(np.isfinite(t) & (z >= 0) & (z <= height))
        return _smallest_positive([t1, t2], oks)

    raise SceneError(f"unknown shape kind {shape.kind!r}")


def ray_primitive_intersect(origin, direction, shape: ShapeSpec):
    """Nearest hit ``(t, class, instance)`` of a single ray, or None."""
    d = _as_vec(direction)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be unit length")
    t = float(intersect_many(_as_vec(origin)[None, :], d[None, :], shape)[0])
    if not math.isfinite(t):
        return None
    return t, shape.kind, shape.instance_id


def implicit_residual(points: np.ndarray, shape: ShapeSpec) -> np.ndarray:
    """Signed-ish distance-like residual of points to a shape's surface.

    Zero on the surface; used to check noiseless scans. Units are metres for
    every kind (sphere/cylinder: radial gap, cone: gap scaled by its slant).
    """
    p = np.asarray(points, dtype=float)
    if shape.kind == SemanticClass.GROUND_PLANE:
        return p[..., 2] - shape.position[2]
    lp = (p - np.asarray(shape.position)) @ shape.rotation()
    x, y, z = lp[..., 0], lp[..., 1], lp[..., 2]
    if shape.kind == SemanticClass.PLANE:
        return z
    if shape.kind == SemanticClass.SPHERE:
        return np.sqrt(x * x + y * y + z * z) - shape.params[0]
    if shape.kind == SemanticClass.CYLINDER:
        return np.hypot(x, y) - shape.params[0]
    rad, height = shape.params
    k = rad / height
    return (np.hypot(x, y) - k * (height - z)) / math.sqrt(1 + k * k)


def ray_directions(lidar: LidarSpec) -> np.ndarray:
    th = lidar.thetas()[:, None]
    ph = lidar.phis()[None, :]
    ct = np.cos(th)
    return np.stack(
        np.broadcast_arrays(ct * np.cos(ph), ct * np.sin(ph), np.sin(th)), axis=-1
    )


def simulate_scan(scene: SceneSpec) -> StructuredCloud:
    """Ray-cast ``scene`` into a (n_beams, n_cols) cloud with ground truth."""
    scene.validate()
    lidar = scene.lidar
    dirs = ray_directions(lidar)
    rows, cols = dirs.shape[:2]
    origin = np.asarray(lidar.origin, dtype=float)
    best_t = np.full((rows, cols), np.inf)
    gt_class = np.zeros((rows, cols), dtype=np.int8)
    gt_inst = np.zeros((rows, cols), dtype=np.int32)
    flat_dirs = dirs.reshape(-1, 3)
    for shape in scene.shapes:
        t = intersect_many(origin[None, :], flat_dirs, shape).reshape(rows, cols)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        gt_class[closer] = int(shape.kind)
        gt_inst[closer] = shape.instance_id
    hit = np.isfinite(best_t)
    rng = np.random.default_rng(scene.seed)
    noise = rng.normal(0.0, lidar.noise_sigma, size=(rows, cols)) if lidar.noise_sigma > 0 else 0.0
    r = np.where(hit, best_t + noise, 0.0)
    valid = hit & (r >= lidar.r_min) & (r <= lidar.r_max)
    r = np.where(valid, r, 0.0)
    gt_class = np.where(valid, gt_class, 0)
    gt_inst = np.where(valid, gt_inst, 0)
    return StructuredCloud(lidar.thetas(), lidar.phis(), r, valid, gt_class, gt_inst)


def mirror_cloud(cloud: StructuredCloud, axis: str) -> StructuredCloud:
    """Reflect across the x axis (y -> -y), the y axis (x -> -x), or both (``"xy"``)."""
    if axis == "x":
        new_phi = (TWO_PI - cloud.phi) % TWO_PI
    elif axis == "y":
        new_phi = (math.pi - cloud.phi) % TWO_PI
    elif axis in ("xy", "yx"):
        new_phi = (math.pi + cloud.phi) % TWO_PI
    elif axis in ("", "none"):
        return cloud
    else:
        raise ValueError(f"unknown mirror axis {axis!r}")
    new_phi = np.where(new_phi >= TWO_PI, 0.0, new_phi)
    order = np.argsort(new_phi, kind="stable")
    take = lambda a: None if a is None else a[:, order]  # noqa: E731
    return StructuredCloud(
        cloud.theta, new_phi[order], take(cloud.r), take(cloud.valid),
        take(cloud.gt_class), take(cloud.gt_instance),
    )


# --- scene files -----------------------------------------------------------

def format_scene(scene: SceneSpec) -> str:
    l = scene.lidar
    lines = [
        "# kind instance x y z roll pitch yaw params...",
        "lidar n_beams={} theta_min={!r} theta_max={!r} step={!r} r_min={!r} r_max={!r} "
        "noise={!r} origin={!r},{!r},{!r} seed={}".format(
            l.n_beams, l.vertical_fov[0], l.vertical_fov[1], l.horizontal_step, l.r_min,
            l.r_max, l.noise_sigma, *l.origin, scene.seed,
        ),
    ]
    for s in scene.shapes:
        nums = list(s.position) + list(s.orientation) + list(s.params)
        lines.append(" ".join([_KIND_WRITE[s.kind], str(s.instance_id)] + [repr(float(v)) for v in nums]))
    return "\n".join(lines) + "\n"


def parse_scene(text: str) -> SceneSpec:
    lidar = LidarSpec()
    seed = 0
    shapes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "lidar":
                kv = dict(p.split("=", 1) for p in parts[1:])
                ox, oy, oz = (float(v) for v in kv.get("origin", "0,0,0").split(","))
                lidar = LidarSpec(
                    n_beams=int(kv.get("n_beams", lidar.n_beams)),
                    vertical_fov=(float(kv.get("theta_min", lidar.vertical_fov[0])),
                                  float(kv.get("theta_max", lidar.vertical_fov[1]))),
                    horizontal_step=float(kv.get("step", lidar.horizontal_step)),
                    r_min=float(kv.get("r_min", lidar.r_min)),
                    r_max=float(kv.get("r_max", lidar.r_max)),
                    noise_sigma=float(kv.get("noise", lidar.noise_sigma)),
                    origin=(ox, oy, oz),
                )
                seed = int(kv.get("seed", seed))
                continue
            kind = KIND_NAMES[parts[0]]
            inst = int(parts[1])
            nums = [float(v) for v in parts[2:]]
        except (KeyError, ValueError, IndexError):
            raise SceneError(f"line {lineno}: cannot parse {raw!r}") from None
        if len(nums) != 6 + PARAM_COUNT[kind]:
            raise SceneError(f"line {lineno}: {parts[0]} expects {6 + PARAM_COUNT[kind]} numbers")
        shapes.append(ShapeSpec(kind, inst, tuple(nums[:3]), tuple(nums[3:6]), tuple(nums[6:])))
    scene = SceneSpec(tuple(shapes), lidar, seed)
    scene.validate()
    return scene


# --- random scenes and datasets ---------------------------------------------

SENSOR_HEIGHT = 1.8


def random_scene(rng: np.random.Generator, n_objects: Optional[int] = None,
                 lidar: Optional[LidarSpec] = None, seed: int = 0,
                 distance: tuple[float, float] = (6.0, 30.0),
                 scale: tuple[float, float] = (0.6, 4.0)) -> SceneSpec:
    """Multi-object scene: a ground plane plus assorted primitives.

    Objects vary in scale (log-uniform over ``scale``), orientation, distance
    and mutual occlusion. The ground sits ``SENSOR_HEIGHT`` below the lidar.
    """
    lidar = lidar or LidarSpec()
    ground_z = lidar.origin[2] - SENSOR_HEIGHT
    shapes = [ShapeSpec(SemanticClass.GROUND_PLANE, 1, (0.0, 0.0, ground_z))]
    if n_objects is None:
        n_objects = int(rng.integers(6, 13))
    kinds = [SemanticClass.PLANE, SemanticClass.CYLINDER, SemanticClass.SPHERE, SemanticClass.CONE]
    # make sure every object class shows up in most scenes
    sequence = list(rng.permutation(kinds)) + list(rng.choice(kinds, size=max(0, n_objects - 4)))
    ox, oy = lidar.origin[0], lidar.origin[1]
    for k, kind in enumerate(sequence[:n_objects]):
        inst = k + 2
        dist = float(rng.uniform(*distance))
        ang = float(rng.uniform(0, TWO_PI))
        cx, cy = ox + dist * math.cos(ang), oy + dist * math.sin(ang)
        size = float(np.exp(rng.uniform(math.log(scale[0]), math.log(scale[1]))))
        yaw = float(rng.uniform(0, TWO_PI))
        if kind == SemanticClass.PLANE:
            hx, hy = size * rng.uniform(1.0, 3.0), size * rng.uniform(0.8, 2.0)
            # mostly upright walls facing somewhere, with some tilt
            tilt = float(rng.uniform(-0.4, 0.4))
            shapes.append(ShapeSpec(kind, inst, (cx, cy, ground_z + hy + 0.05),
                                    (math.pi / 2 + tilt, 0.0, yaw), (float(hx), float(hy))))
        elif kind == SemanticClass.SPHERE:
            rad = size * rng.uniform(0.6, 1.3)
            lift = float(rng.uniform(0.0, 1.5))
            shapes.append(ShapeSpec(kind, inst, (cx, cy, ground_z + rad + lift), (0.0, 0.0, 0.0),
                                    (float(rad),)))
        elif kind == SemanticClass.CYLINDER:
            rad = size * rng.uniform(0.4, 1.0)
            height = size * rng.uniform(1.5, 4.0)
            if rng.random() < 0.3:
                # lying on its side
                shapes.append(ShapeSpec(kind, inst, (cx, cy, ground_z + rad),
                                        (math.pi / 2, 0.0, yaw), (float(rad), float(height))))
            else:
                shapes.append(ShapeSpec(kind, inst, (cx, cy, ground_z), (0.0, 0.0, yaw),
                                        (float(rad), float(height))))
        else:
            rad = size * rng.uniform(0.6, 1.4)
            height = size * rng.uniform(1.5, 3.5)
            shapes.append(ShapeSpec(kind, inst, (cx, cy, ground_z), (0.0, 0.0, yaw),
                                    (float(rad), float(height))))
    return SceneSpec(tuple(shapes), lidar, seed)


@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 24
    n_clouds: int = 289
    shift_step: float = 1.5
    split: tuple[float, float, float] = (0.6, 0.1, 0.3)
    seed: int = 0
    lidar: LidarSpec = field(default_factory=LidarSpec)
    mirror_train: bool = True


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str
    scene: int
    shift: int
    mirror: str = "none"

    def line(self) -> str:
        return f"{self.path} {self.split} {self.scene} {self.shift} {self.mirror}"


MIRRORS = ("none", "x", "y", "xy")


def shift_offsets(n: int, step: float) -> list[tuple[float, float]]:
    """First ``n`` points of a square spiral around the origin (spacing ``step``)."""
    out = [(0.0, 0.0)]
    x = y = 0
    dx, dy = 1, 0
    seg_len, seg_pos, turns = 1, 0, 0
    while len(out) < n:
        x, y = x + dx, y + dy
        out.append((x * step, y * step))
        seg_pos += 1
        if seg_pos == seg_len:
            seg_pos = 0
            dx, dy = -dy, dx
            turns += 1
            if turns % 2 == 0:
                seg_len += 1
    return out[:n]


def dataset_scenes(config: DatasetConfig) -> list[tuple[int, int, SceneSpec]]:
    """(scene index, shift index, scene with shifted lidar) for every cloud."""
    if config.n_scenes < 1 or config.n_clouds < config.n_scenes:
        raise ValueError("need n_clouds >= n_scenes >= 1")
    root = np.random.default_rng(config.seed)
    base_seeds = root.integers(0, 2**31 - 1, size=config.n_scenes)
    per_scene = [config.n_clouds // config.n_scenes] * config.n_scenes
    for i in range(config.n_clouds % config.n_scenes):
        per_scene[i] += 1
    out = []
    for s, (count, bseed) in enumerate(zip(per_scene, base_seeds)):
        base = random_scene(np.random.default_rng(int(bseed)), lidar=config.lidar)
        for k, (sx, sy) in enumerate(shift_offsets(count, config.shift_step)):
            o = config.lidar.origin
            lidar = replace(config.lidar, origin=(o[0] + sx, o[1] + sy, o[2]))
            scan_seed = int(np.random.default_rng([int(bseed), k]).integers(0, 2**31 - 1))
            out.append((s, k, replace(base, lidar=lidar, seed=scan_seed)))
    return out


def split_indices(n: int, ratios: tuple[float, float, float], seed: int) -> list[str]:
    total = sum(ratios)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    n_val = min(n_val, n - n_train)
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
    perm = np.random.default_rng(seed + 7919).permutation(n)
    out = np.empty(n, dtype=object)
    out[perm] = labels
    return list(out)


def generate_dataset(config: DatasetConfig, out_dir) -> list[ManifestEntry]:
    """Scan every scene/shift, write clouds and ``manifest.txt`` under ``out_dir``.

    Mirrored training copies reference the original file with a mirror tag;
    ``load_entry`` applies the reflection on load.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = dataset_scenes(config)
    splits = split_indices(len(scenes), config.split, config.seed)
    entries = []
    for (s, k, scene), split in zip(scenes, splits):
        name = f"scene{s:03d}_shift{k:02d}.slc.gz"
        save_cloud(simulate_scan(scene), out_dir / name)
        (out_dir / f"scene{s:03d}.scene").write_text(format_scene(replace(scene, lidar=config.lidar)))
        mirrors = MIRRORS if (split == "train" and config.mirror_train) else ("none",)
        for m in mirrors:
            entries.append(ManifestEntry(name, split, s, k, m))
    write_manifest(entries, out_dir / "manifest.txt")
    log.info("wrote %d clouds (%d manifest entries) to %s", len(scenes), len(entries), out_dir)
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    Path(path).write_text("".join(e.line() + "\n" for e in entries))


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5 or parts[4] not in MIRRORS:
            raise ValueError(f"{path}:{lineno}: malformed manifest line")
        entries.append(ManifestEntry(parts[0], parts[1], int(parts[2]), int(parts[3]), parts[4]))
    return entries


def load_entry(entry: ManifestEntry, root) -> StructuredCloud:
    cloud = load_cloud(Path(root) / entry.path)
    return mirror_cloud(cloud, entry.mirror)
