import filecmp
from collections import Counter

import numpy as np
import pytest

from revdomain import render
from revdomain.io import read_depth, read_manifest, read_pgm
from revdomain.render import (
    EndoscopeCamera,
    InfiniteCylinder,
    LightRig,
    Scene,
    SceneConfig,
    Sphere,
    apply_texture,
    assign_splits,
    generate_dataset,
    make_scene,
    render_item,
    render_view,
    shade,
)


def frontal_camera(res=(65, 65)):
    return EndoscopeCamera(np.zeros(3), [0, 0, 1], [0, 1, 0], 120.0, res)


def coaxial_rig(power=1.0):
    return LightRig(np.zeros((2, 3)), [power / 2, power / 2])


# -- shading ---------------------------------------------------------------


@pytest.mark.parametrize("d", [0.3, 1.0, 2.5, 7.0])
def test_inverse_square_ratio(d):
    cam, rig = frontal_camera(), coaxial_rig()
    n = np.array([[0.0, 0.0, -1.0]])
    near = shade(np.array([[0.0, 0.0, d]]), n, cam, rig)[0]
    far = shade(np.array([[0.0, 0.0, 2 * d]]), n, cam, rig)[0]
    assert near / far == pytest.approx(4.0, abs=1e-6)


def test_frontal_unit_distance_value():
    v = shade(np.array([[0.0, 0.0, 1.0]]), np.array([[0.0, 0.0, -1.0]]), frontal_camera(), coaxial_rig())
    assert v[0] == pytest.approx(1.0, abs=1e-15)


def test_lambert_perpendicular_is_zero():
    # light along +z from the point, normal along +x
    v = shade(np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]), frontal_camera(), coaxial_rig())
    assert v[0] == 0.0


def test_backfacing_is_zero():
    v = shade(np.array([[0.0, 0.0, 1.0]]), np.array([[0.0, 0.0, 1.0]]), frontal_camera(), coaxial_rig())
    assert v[0] == 0.0


def test_superposition_of_lights():
    rng = np.random.default_rng(0)
    cam = frontal_camera()
    pts = rng.normal(size=(50, 3)) + [0, 0, 3]
    nrm = rng.normal(size=(50, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    o, q = np.array([0.05, 0.0, 0.0]), np.array([-0.05, 0.02, 0.0])
    split = shade(pts, nrm, cam, LightRig([o, o, q], [0.5, 0.5, 1.0]))
    whole = shade(pts, nrm, cam, LightRig([o, q], [1.0, 1.0]))
    np.testing.assert_allclose(split, whole, rtol=0, atol=1e-12)


def test_light_rig_validation():
    with pytest.raises(ValueError):
        LightRig(np.zeros((1, 3)), [1.0])
    with pytest.raises(ValueError):
        LightRig(np.zeros((4, 3)), [1.0] * 4)
    with pytest.raises(ValueError):
        LightRig(np.zeros((2, 3)), [1.0, 0.0])


def test_camera_validation_and_orthonormal():
    cam = EndoscopeCamera(np.zeros(3), [0, 0, 2], [0.3, 1, 0.5])
    assert abs(cam.forward @ cam.up) < 1e-15
    assert np.linalg.norm(cam.up) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        EndoscopeCamera(np.zeros(3), [0, 0, 1], [0, 1, 0], fov_degrees=170.0)
    with pytest.raises(ValueError):
        EndoscopeCamera(np.zeros(3), [0, 0, 1], [0, 0, 3])


# -- depth on analytic primitives -----------------------------------------


def ray_sphere(dirs, center, r):
    b = dirs @ center
    disc = b ** 2 - (center @ center - r ** 2)
    t = np.where(disc >= 0, b - np.sqrt(np.maximum(disc, 0)), np.inf)
    return np.where(t > 0, t, np.inf)


@pytest.mark.parametrize("d,r", [(3.0, 1.0), (5.0, 2.0), (2.0, 0.5)])
def test_sphere_depth_matches_closed_form(d, r):
    cam = frontal_camera()
    sphere = Sphere(np.array([0.0, 0.0, d]), r)
    pair = render_view(sphere, cam, coaxial_rig())
    dirs = cam.ray_directions().reshape(-1, 3)
    want = ray_sphere(dirs, sphere.center, r).reshape(pair.depth.shape)
    center = pair.depth[32, 32]
    assert abs(center - (d - r)) < 1e-3
    hit = np.isfinite(want)
    assert np.array_equal(np.isfinite(pair.depth)[hit], np.ones(hit.sum(), dtype=bool))
    err = np.abs(pair.depth[hit] - want[hit])
    assert np.mean(err < 1e-3) >= 0.99


def test_cylinder_depth_matches_closed_form():
    cam = EndoscopeCamera([0.2, -0.1, 0.0], [0.3, 0.1, 1.0], [0, 1, 0], 120.0, (48, 40))
    cyl = InfiniteCylinder(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0)
    pair = render_view(cyl, cam, coaxial_rig(), max_dist=200.0)
    dirs = cam.ray_directions().reshape(-1, 3)
    o = cam.position
    a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
    b = 2 * (o[0] * dirs[:, 0] + o[1] * dirs[:, 1])
    c = o[0] ** 2 + o[1] ** 2 - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        want = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
    want = np.where(want < 200.0, want, np.inf).reshape(pair.depth.shape)
    hit = np.isfinite(want) & np.isfinite(pair.depth)
    assert hit.sum() >= 0.95 * np.isfinite(want).sum()
    assert np.mean(np.abs(pair.depth[hit] - want[hit]) < 1e-3) >= 0.99


def test_finite_depths_at_least_eps():
    pair = render_item(11)
    d = pair.depth[np.isfinite(pair.depth)]
    assert d.size > 0 and d.min() >= 1e-6


def test_doubling_lights_doubles_radiance():
    scene = make_scene(3)
    cam, rig = render.sample_view(scene, np.random.default_rng(3))
    a = render_view(scene, cam, rig)
    b = render_view(scene, cam, rig.scaled(2.0))
    np.testing.assert_array_equal(b.radiance, 2.0 * a.radiance)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_render_deterministic():
    a, b = render_item(1234), render_item(1234)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.depth, b.depth)


def test_render_rejects_camera_outside():
    scene = make_scene(2)
    cam = EndoscopeCamera([10.0, 10.0, 0.0], [0, 0, 1], [0, 1, 0])
    with pytest.raises(ValueError, match="outside"):
        render_view(scene, cam, coaxial_rig())


def test_rendered_scene_hits_walls():
    pair = render_item(5)
    assert np.isfinite(pair.depth).mean() > 0.95
    assert pair.image.shape == pair.depth.shape == (64, 64)
    assert 0.0 <= pair.image.min() and pair.image.max() <= 1.0
    assert pair.image.std() > 0.02


# -- scenes ---------------------------------------------------------------


def test_make_scene_deterministic():
    a, b = make_scene(42), make_scene(42)
    assert np.array_equal(a.centerline, b.centerline)
    assert np.array_equal(a.radius_profile, b.radius_profile)


def test_distinct_seeds_distinct_centerlines():
    lines = [make_scene(s).centerline.tobytes() for s in range(100)]
    assert len(set(lines)) == 100


def test_zero_radius_rejected():
    with pytest.raises(ValueError):
        make_scene(0, SceneConfig(radius=0.0))
    with pytest.raises(ValueError):
        Scene(np.array([[0, 0, 0], [0, 0, 1.0]]), np.array([1.0, 0.0]))


def brute_tube_sdf(scene, pts):
    """Distance to every segment, keep the closest, subtract the interpolated radius."""
    c = scene.centerline
    a, d = c[:-1], np.diff(c, axis=0)
    rel = pts[:, None, :] - a[None]
    t = np.clip((rel * d).sum(-1) / (d * d).sum(-1), 0, 1)
    dist = np.linalg.norm(rel - t[..., None] * d, axis=-1)
    k = dist.argmin(axis=1)
    s = scene.arclength[k] + t[np.arange(len(pts)), k] * np.linalg.norm(d[k], axis=1)
    return dist.min(axis=1) - np.interp(s, scene.arclength, scene.radius_profile)


def test_zero_fold_sdf_is_plain_tube():
    scene = make_scene(9, SceneConfig(fold_amplitude=0.0))
    rng = np.random.default_rng(9)
    idx = rng.integers(0, len(scene.centerline), size=500)
    pts = scene.centerline[idx] + rng.normal(scale=0.8, size=(500, 3))
    np.testing.assert_allclose(scene.sdf(pts), brute_tube_sdf(scene, pts), atol=1e-12)


def test_free_distance_is_conservative():
    scene = make_scene(4)
    rng = np.random.default_rng(4)
    pts = scene.centerline[rng.integers(0, 100, 300)] + rng.normal(scale=0.5, size=(300, 3))
    fd = scene.free_distance(pts)
    # a step of fd along any direction never crosses the wall
    dirs = rng.normal(size=(300, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    inside = fd > 0
    moved = scene.free_distance(pts[inside] + 0.999 * fd[inside, None] * dirs[inside])
    assert np.all(moved > -1e-9)


# -- texture ----------------------------------------------------------------


def test_texture_zero_strength_identity():
    img = render_item(8).image
    assert np.array_equal(apply_texture(img, 1, 0.0), img)


def test_texture_monotone_in_strength():
    img = render_item(8).image
    changes = [np.abs(apply_texture(img, 77, s) - img).mean() for s in np.arange(1, 10) / 10]
    assert all(a < b for a, b in zip(changes, changes[1:]))


def test_texture_deterministic_and_bounded():
    img = render_item(8).image
    a, b = apply_texture(img, 5, 0.6), apply_texture(img, 5, 0.6)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, apply_texture(img, 6, 0.6))


def test_texture_strength_range():
    with pytest.raises(ValueError):
        apply_texture(np.zeros((4, 4)), 0, 1.5)


# -- datasets -------------------------------------------------------------


def test_split_counts_100():
    c = Counter(assign_splits(100, 3))
    assert (c["train"], c["val"], c["test"]) == (55, 40, 5)


def test_splits_deterministic():
    assert assign_splits(50, 1) == assign_splits(50, 1)


def test_generate_dataset_files(tmp_path):
    m = generate_dataset(10, 7, tmp_path / "d")
    recs = read_manifest(m.path)
    assert len(recs) == 10
    assert [r.index for r in recs] == list(range(10))
    for r in recs:
        assert read_pgm(r.image_path).shape == (64, 64)
        assert read_depth(r.depth_path).shape == (64, 64)
    assert (tmp_path / "d" / "images" / "00000.pgm").stat().st_size == len(b"P5\n64 64\n255\n") + 64 * 64
    assert (tmp_path / "d" / "depth" / "00000.dpth").stat().st_size == 12 + 4 * 64 * 64


def test_generate_dataset_byte_identical(tmp_path):
    generate_dataset(3, 11, tmp_path / "a")
    generate_dataset(3, 11, tmp_path / "b")
    for rel in ["manifest.tsv", "images/00001.pgm", "depth/00002.dpth"]:
        assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False)


def test_texturing_leaves_depth_bytes(tmp_path):
    plain = generate_dataset(3, 5, tmp_path / "plain")
    tex = generate_dataset(3, 5, tmp_path / "tex", textured=True)
    for a, b in zip(read_manifest(plain.path), read_manifest(tex.path)):
        assert filecmp.cmp(a.depth_path, b.depth_path, shallow=False)
    for a, c in zip(read_manifest(plain.path), read_manifest(tex.clean_path)):
        assert filecmp.cmp(a.image_path, c.image_path, shallow=False)
    t0 = read_pgm(read_manifest(tex.path)[0].image_path)
    c0 = read_pgm(read_manifest(tex.clean_path)[0].image_path)
    assert not np.array_equal(t0, c0)


def test_generate_dataset_cleans_up_on_failure(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = render.write_depth

    def flaky(path, depth):
        calls["n"] += 1
        if calls["n"] == 2:
            raise OSError("disk full")
        real(path, depth)

    monkeypatch.setattr(render, "write_depth", flaky)
    with pytest.raises(OSError):
        generate_dataset(3, 1, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_generate_dataset_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(0, 1, tmp_path / "x")
