import math

import numpy as np
import pytest

from surfseg.cloud import SemanticClass, TWO_PI, load_cloud, spherical_to_cartesian
from surfseg.scene import (DatasetConfig, LidarSpec, SceneError, SceneSpec, ShapeSpec, SENSOR_HEIGHT,
                           dataset_scenes, format_scene, generate_dataset, implicit_residual,
                           intersect_many, load_entry, mirror_cloud, parse_scene, random_scene,
                           ray_primitive_intersect, read_manifest, shift_offsets, simulate_scan,
                           split_indices)

from conftest import coarse_lidar, ground, scan

S = SemanticClass


def test_sphere_hit_example():
    sphere = ShapeSpec(S.SPHERE, 7, (3.0, 0.0, 0.0), params=(1.0,))
    t, kind, inst = ray_primitive_intersect((0, 0, 0), (1, 0, 0), sphere)
    assert t == pytest.approx(2.0) and kind == S.SPHERE and inst == 7


def test_ground_hit_example():
    g = ShapeSpec(S.GROUND_PLANE, 1, (0.0, 0.0, 0.0))
    t, kind, _ = ray_primitive_intersect((0, 0, 5), (0, 0, -1), g)
    assert t == pytest.approx(5.0) and kind == S.GROUND_PLANE


def test_sphere_miss_example():
    sphere = ShapeSpec(S.SPHERE, 1, (0.0, 5.0, 0.0), params=(1.0,))
    assert ray_primitive_intersect((0, 0, 0), (1, 0, 0), sphere) is None


def test_direction_must_be_unit():
    with pytest.raises(ValueError):
        ray_primitive_intersect((0, 0, 0), (2, 0, 0), ground())


def test_cone_has_no_base_cap_and_apex_up():
    cone = ShapeSpec(S.CONE, 1, (0.0, 0.0, 0.0), params=(1.0, 2.0))
    # straight up from below the base passes through the open base and hits the inner wall at the apex
    t, _, _ = ray_primitive_intersect((0.0, 0.0, -1.0), (0, 0, 1), cone)
    assert t == pytest.approx(3.0)
    # horizontal ray at half height hits the slant where radius is 0.5
    t, _, _ = ray_primitive_intersect((-5.0, 0.0, 1.0), (1, 0, 0), cone)
    assert t == pytest.approx(4.5)


def test_cylinder_axis_ray_misses():
    cyl = ShapeSpec(S.CYLINDER, 1, (0.0, 0.0, 0.0), params=(1.0, 2.0))
    assert ray_primitive_intersect((0.0, 0.0, 5.0), (0, 0, -1), cyl) is None


def test_finite_plane_slab():
    wall = ShapeSpec(S.PLANE, 1, (4.0, 0.0, 0.0), (0.0, math.pi / 2, 0.0), (1.0, 1.0))
    t, _, _ = ray_primitive_intersect((0, 0, 0), (1, 0, 0), wall)
    assert t == pytest.approx(4.0)
    d = np.array([4.0, 1.5, 0.0])
    assert ray_primitive_intersect((0, 0, 0), d / np.linalg.norm(d), wall) is None


# --- marching oracle --------------------------------------------------------

def _inside_bounds(points, shape):
    lp = (points - np.asarray(shape.position)) @ shape.rotation()
    if shape.kind == S.PLANE:
        return (np.abs(lp[:, 0]) <= shape.params[0]) & (np.abs(lp[:, 1]) <= shape.params[1])
    if shape.kind in (S.CYLINDER, S.CONE):
        return (lp[:, 2] >= 0) & (lp[:, 2] <= shape.params[1])
    return np.ones(len(points), bool)


def _march(origin, d, shape, t_max=40.0, step=2e-3):
    t = np.arange(step, t_max, step)
    pts = origin + t[:, None] * d
    f = implicit_residual(pts, shape)
    cross = (np.sign(f[:-1]) != np.sign(f[1:])) & _inside_bounds(pts[:-1], shape) & _inside_bounds(pts[1:], shape)
    hits = t[:-1][cross]
    return hits[0] if len(hits) else math.inf


def _random_shape(rng, kind):
    pos = tuple(rng.uniform(-6, 6, 3))
    ori = tuple(rng.uniform(-math.pi, math.pi, 3))
    if kind == S.SPHERE:
        return ShapeSpec(kind, 1, pos, (0, 0, 0), (float(rng.uniform(0.5, 3)),))
    if kind == S.PLANE:
        return ShapeSpec(kind, 1, pos, ori, tuple(rng.uniform(0.5, 4, 2)))
    return ShapeSpec(kind, 1, pos, ori, (float(rng.uniform(0.5, 2.5)), float(rng.uniform(1, 5))))


@pytest.mark.parametrize("kind", [S.SPHERE, S.PLANE, S.CYLINDER, S.CONE])
def test_nearest_hit_matches_marching(kind, rng):
    agree = 0
    for _ in range(60):
        shape = _random_shape(rng, kind)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        # aim roughly at the shape so most rays hit
        to = np.asarray(shape.position) + rng.normal(scale=1.0, size=3)
        d = to / np.linalg.norm(to) if rng.random() < 0.8 else d
        origin = np.zeros(3)
        t = float(intersect_many(origin[None], d[None], shape)[0])
        t_m = _march(origin, d, shape)
        if math.isfinite(t):
            p = origin + t * d
            assert abs(implicit_residual(p[None], shape)[0]) < 1e-6
            assert _inside_bounds(p[None], shape)[0]
            # returned t is no later than any sampled crossing
            assert t <= t_m + 2e-3
        if math.isfinite(t_m):
            assert math.isfinite(t)
        agree += math.isfinite(t) == math.isfinite(t_m)
    # tangential grazes may be missed by the sampler, never many
    assert agree >= 57


def test_grid_dimensions_default():
    cloud = simulate_scan(SceneSpec((ground(),), LidarSpec(noise_sigma=0.0)))
    assert cloud.shape == (32, 1800)


def test_noiseless_ground_range():
    cloud = scan([ground()])
    th = cloud.theta
    down = th < -0.05
    expected = SENSOR_HEIGHT / np.sin(-th[down])
    got = cloud.r[down]
    ok = cloud.valid[down]
    assert ok.any()
    assert np.allclose(got[ok], np.broadcast_to(expected[:, None], got.shape)[ok], rtol=1e-12)
    assert not cloud.valid[th >= 0].any()


def test_empty_scene_all_invalid():
    cloud = scan([])
    assert cloud.n_valid == 0


def test_same_seed_same_cloud_and_noise_on_range_only():
    shapes = [ground(), ShapeSpec(S.SPHERE, 2, (6.0, 0.0, 0.0), params=(1.5,))]
    a = scan(shapes, noise=0.1, seed=5)
    b = scan(shapes, noise=0.1, seed=5)
    c = scan(shapes, noise=0.1, seed=6)
    clean = scan(shapes, noise=0.0)
    assert a.equals(b) and not a.equals(c)
    both = a.valid & clean.valid
    resid = (a.r - clean.r)[both]
    assert 0.08 < resid.std() < 0.12
    assert np.array_equal(a.theta, clean.theta) and np.array_equal(a.phi, clean.phi)


def test_noiseless_points_on_surfaces():
    scene = random_scene(np.random.default_rng(3), lidar=coarse_lidar(0.0))
    cloud = simulate_scan(scene)
    xyz = cloud.xyz()
    by_id = {s.instance_id: s for s in scene.shapes}
    for inst in np.unique(cloud.gt_instance[cloud.valid]):
        m = cloud.valid & (cloud.gt_instance == inst)
        res = implicit_residual(xyz[m], by_id[int(inst)])
        assert np.abs(res).max() < 1e-6


def test_occlusion_nearest_shape_wins():
    scene = random_scene(np.random.default_rng(11), lidar=coarse_lidar(0.0))
    cloud = simulate_scan(scene)
    from surfseg.scene import ray_directions
    dirs = ray_directions(scene.lidar).reshape(-1, 3)
    ts = np.stack([intersect_many(np.zeros((1, 3)), dirs, s) for s in scene.shapes])
    best = np.array([s.instance_id for s in scene.shapes])[np.argmin(ts, axis=0)].reshape(cloud.shape)
    assert np.array_equal(cloud.gt_instance[cloud.valid], best[cloud.valid])
    kinds = {s.instance_id: int(s.kind) for s in scene.shapes}
    assert all(kinds[i] == c for i, c in zip(cloud.gt_instance[cloud.valid], cloud.gt_class[cloud.valid]))


def test_random_scene_has_every_object_class():
    scene = random_scene(np.random.default_rng(0))
    kinds = {s.kind for s in scene.shapes}
    assert kinds == set(S)
    scene.validate()


def test_validation_errors():
    with pytest.raises(SceneError):
        LidarSpec(n_beams=1).validate()
    with pytest.raises(SceneError):
        LidarSpec(horizontal_step=0.0).validate()
    with pytest.raises(SceneError):
        LidarSpec(noise_sigma=-1).validate()
    with pytest.raises(SceneError):
        SceneSpec((ground(), ShapeSpec(S.SPHERE, 1, params=(1.0,)))).validate()
    with pytest.raises(SceneError):
        ShapeSpec(S.SPHERE, 2, params=(0.0,)).validate()
    with pytest.raises(SceneError):
        SceneSpec((ground(), ShapeSpec(S.GROUND_PLANE, 2))).validate()


# --- mirroring --------------------------------------------------------------

@pytest.fixture(scope="module")
def scene_cloud():
    scene = random_scene(np.random.default_rng(4), lidar=coarse_lidar(0.1))
    return simulate_scan(scene)


@pytest.mark.parametrize("axis", ["x", "y", "xy"])
def test_mirror_is_involution(scene_cloud, axis):
    back = mirror_cloud(mirror_cloud(scene_cloud, axis), axis)
    assert back.equals(scene_cloud, rtol=1e-12)
    assert np.array_equal(back.r, scene_cloud.r)


def test_mirror_phi_example():
    cloud = scan([ground()], step_deg=90.0, beams=4)
    assert cloud.phi[1] == pytest.approx(math.pi / 2)
    m = mirror_cloud(cloud, "x")
    assert np.all(np.diff(m.phi) > 0)
    assert m.phi[3] == pytest.approx(3 * math.pi / 2)
    assert np.array_equal(m.r[:, 3], cloud.r[:, 1])


@pytest.mark.parametrize("axis, flip", [("x", (1, -1, 1)), ("y", (-1, 1, 1)), ("xy", (-1, -1, 1))])
def test_mirror_cartesian(scene_cloud, axis, flip, rng):
    m = mirror_cloud(scene_cloud, axis)
    orig = {tuple(np.round(p, 6)) for p in scene_cloud.xyz()[scene_cloud.valid] * np.array(flip)}
    got = m.xyz()[m.valid]
    sample = got[rng.choice(len(got), 200, replace=False)]
    assert all(tuple(np.round(p, 6)) in orig for p in sample)
    assert m.n_valid == scene_cloud.n_valid
    assert np.all(np.diff(m.phi) > 0) and m.phi.min() >= 0 and m.phi.max() < TWO_PI


def test_mirror_scene_matches_scan_of_mirrored_scene():
    s = ShapeSpec(S.SPHERE, 2, (5.0, 2.0, 0.0), params=(1.0,))
    a = mirror_cloud(scan([ground(), s]), "x")
    b = scan([ground(), ShapeSpec(S.SPHERE, 2, (5.0, -2.0, 0.0), params=(1.0,))])
    assert np.array_equal(a.valid, b.valid)
    assert np.allclose(a.r, b.r, atol=1e-9)


# --- scene files and datasets ----------------------------------------------

def test_scene_text_round_trip():
    scene = random_scene(np.random.default_rng(9), seed=42)
    assert parse_scene(format_scene(scene)) == scene


def test_scene_parse_errors():
    with pytest.raises(SceneError, match="line 1"):
        parse_scene("sphere 1 0 0 0 0 0 0\n")
    with pytest.raises(SceneError):
        parse_scene("teapot 1 0 0 0 0 0 0 1\n")


def test_shift_spiral_distinct():
    offs = shift_offsets(13, 1.5)
    assert offs[0] == (0.0, 0.0) and len(set(offs)) == 13
    assert max(max(abs(x), abs(y)) for x, y in offs) <= 3.0


def test_default_split_sizes():
    labels = split_indices(289, (0.6, 0.1, 0.3), 0)
    counts = {s: labels.count(s) for s in ("train", "val", "test")}
    assert counts == {"train": 173, "val": 29, "test": 87}
    assert 4 * counts["train"] == 692


def test_dataset_scenes_count():
    sc = dataset_scenes(DatasetConfig())
    assert len(sc) == 289
    assert len({s for s, _, _ in sc}) == 24
    per = np.bincount([s for s, _, _ in sc])
    assert per.min() >= 12 and per.max() <= 13


def test_generate_dataset(tmp_path):
    cfg = DatasetConfig(n_scenes=3, n_clouds=10, lidar=coarse_lidar(0.1, step_deg=2.0), seed=1)
    entries = generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b")
    ma = (tmp_path / "a" / "manifest.txt").read_bytes()
    assert ma == (tmp_path / "b" / "manifest.txt").read_bytes()
    for e in entries:
        assert (tmp_path / "a" / e.path).read_bytes() == (tmp_path / "b" / e.path).read_bytes()
    assert read_manifest(tmp_path / "a" / "manifest.txt") == entries
    train = [e for e in entries if e.split == "train"]
    labels = split_indices(10, cfg.split, cfg.seed)
    assert len(train) == 4 * labels.count("train")
    assert {e.mirror for e in train} == {"none", "x", "y", "xy"}
    assert all(e.mirror == "none" for e in entries if e.split != "train")
    e = next(e for e in train if e.mirror == "y")
    base = load_cloud(tmp_path / "a" / e.path)
    assert load_entry(e, tmp_path / "a").equals(mirror_cloud(base, "y"))


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("a.slc train 0 0 sideways\n")
    with pytest.raises(ValueError):
        read_manifest(p)
