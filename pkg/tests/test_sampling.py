import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csgfit.sampling import (
    FREESPACE, SURFACE_IN, SURFACE_OUT, Camera, DepthImage, SampleSet, build_scene_samples,
    edge_pixels, freespace_samples, normalize_to_unit_cube, subsample, surface_samples, unproject,
    unproject_organized,
)
from csgfit.scenegen import analytic_occupancy, builtin_scene, scene_to_depth_input


def frontal_plane(w=4, h=4, z=2.0):
    return DepthImage(np.full((h, w), z)), Camera(2.0, 2.0, w / 2, h / 2, w, h)


def test_camera_defaults():
    cam = Camera.default(64, 48)
    assert cam.fx == cam.fy == pytest.approx(0.6 * 64)
    assert (cam.cx, cam.cy) == (32.0, 24.0)


@pytest.mark.parametrize("kw", [dict(fx=0), dict(cx=10), dict(cy=-1)])
def test_camera_validation(kw):
    args = dict(fx=1.0, fy=1.0, cx=1.0, cy=1.0, width=4, height=4)
    args.update(kw)
    with pytest.raises(ValueError):
        Camera(**args)


def test_unproject_principal_and_45_degree_rays():
    cam = Camera(10.0, 10.0, 5.0, 5.0, 20, 20)
    d = np.zeros((20, 20))
    d[5, 5] = 2.0
    d[5, 15] = 1.0
    pts = unproject(DepthImage(d), cam)
    np.testing.assert_allclose(pts, [[0, 0, 2], [1, 0, 1]])


def test_unproject_errors_on_empty_mask_and_size_mismatch():
    cam = Camera.default(4, 4)
    with pytest.raises(ValueError):
        unproject(DepthImage(np.zeros((4, 4))), cam)
    with pytest.raises(ValueError):
        unproject(DepthImage(np.ones((3, 4))), cam)


def test_constant_depth_gives_planar_cloud():
    d, cam = frontal_plane(8, 6, 3.0)
    pts = unproject(d, cam)
    assert np.ptp(pts[:, 2]) == 0.0


def test_invalid_pixels_are_masked():
    v = np.ones((3, 3))
    v[0, 0], v[1, 1], v[2, 2] = 0.0, np.nan, np.inf
    d = DepthImage(v)
    assert d.mask.sum() == 6
    org = unproject_organized(d, Camera.default(3, 3))
    assert np.isnan(org[1, 1]).all() and np.isfinite(org[0, 1]).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_projection_inverts_unprojection(seed):
    rng = np.random.default_rng(seed)
    w, h = int(rng.integers(2, 30)), int(rng.integers(2, 30))
    cam = Camera(float(rng.uniform(5, 50)), float(rng.uniform(5, 50)),
                 float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1)), w, h)
    d = DepthImage(rng.uniform(0.5, 5, (h, w)))
    uv = cam.project(unproject(d, cam))
    v, u = np.mgrid[0:h, 0:w]
    np.testing.assert_allclose(uv, np.stack([u.ravel(), v.ravel()], 1), atol=1e-6)


def test_normalize_examples():
    rng = np.random.default_rng(0)
    pts = np.vstack([[0, 0, 0], [2, 2, 2], rng.uniform(0, 2, (20, 3))])
    out, tf = normalize_to_unit_cube(pts)
    assert tf.scale == 0.5
    np.testing.assert_allclose(out.min(0), -0.5)
    np.testing.assert_allclose(out.max(0), 0.5)
    flat = np.array([[0, 0, 0], [2, 1, 1.0]])
    out, _ = normalize_to_unit_cube(flat)
    np.testing.assert_allclose(np.ptp(out, axis=0), [1, 0.5, 0.5])


def test_normalize_rejects_degenerate_input():
    with pytest.raises(ValueError):
        normalize_to_unit_cube(np.ones((5, 3)))
    with pytest.raises(ValueError):
        normalize_to_unit_cube(np.ones((1, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalize_roundtrip_and_bounds(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3)) * rng.uniform(0.01, 100, 3) + rng.normal(size=3) * 50
    out, tf = normalize_to_unit_cube(pts)
    assert np.all(np.abs(out) <= 0.5 + 1e-9)
    assert np.ptp(out, axis=0).max() == pytest.approx(1.0)
    np.testing.assert_allclose(tf.inverse(out), pts, atol=1e-9 * max(1, np.abs(pts).max()))


def test_surface_samples_counts_and_separation():
    d, cam = frontal_plane(4, 4)
    cloud, tf = normalize_to_unit_cube(np.vstack([unproject(d, cam), [[0, 0, 3.0]]]))
    s = surface_samples(d, cam, tf)
    assert (s.kind == SURFACE_IN).sum() == 16 and (s.kind == SURFACE_OUT).sum() == 16
    inside, outside = s.of_kind(SURFACE_IN), s.of_kind(SURFACE_OUT)
    np.testing.assert_allclose(np.linalg.norm(inside.points - outside.points, axis=1), 0.04,
                               atol=1e-9)
    assert np.all(inside.points[:, 2] > outside.points[:, 2])
    assert np.all(inside.labels == 1) and np.all(outside.labels == 0)


def test_surface_samples_require_positive_epsilon():
    d, cam = frontal_plane()
    _, tf = normalize_to_unit_cube(np.array([[0, 0, 0], [1, 1, 1.0]]))
    with pytest.raises(ValueError):
        surface_samples(d, cam, tf, epsilon=0.0)


def test_freespace_samples_lie_in_front_of_the_surface():
    d, cam = frontal_plane(8, 8, 2.0)
    _, tf = normalize_to_unit_cube(unproject(d, cam) + [0, 0, 0.0] if False else
                                   np.vstack([unproject(d, cam), [[0, 0, 2.5]]]))
    s = freespace_samples(d, cam, tf, 5000, np.random.default_rng(0))
    assert len(s) == 5000 and np.all(s.labels == 0) and np.all(s.kind == FREESPACE)
    raw = tf.inverse(s.points)
    # every point's ray depth is short of the plane by at least epsilon (normalized)
    assert np.all(raw[:, 2] < 2.0)
    ray_len = np.linalg.norm(s.points - tf.apply(np.zeros(3)), axis=1)
    surf_len = tf.scale * 2.0 * np.linalg.norm(raw / raw[:, 2:3], axis=1)
    assert np.all(ray_len <= surf_len - 0.02 + 1e-9)


def test_freespace_is_deterministic_and_sized():
    d, cam = frontal_plane(8, 8)
    _, tf = normalize_to_unit_cube(np.vstack([unproject(d, cam), [[0, 0, 2.5]]]))
    a = freespace_samples(d, cam, tf, 1000, np.random.default_rng(7))
    b = freespace_samples(d, cam, tf, 1000, np.random.default_rng(7))
    np.testing.assert_array_equal(a.points, b.points)
    with pytest.raises(ValueError):
        freespace_samples(d, cam, tf, 0, np.random.default_rng(0))


def test_freespace_is_uniform_by_volume_along_depth():
    # narrow frustum in front of a frontal plane: a pyramid's volume below half
    # its height is 1/8 of the whole
    d = DepthImage(np.full((16, 16), 2.0))
    cam = Camera(200.0, 200.0, 8.0, 8.0, 16, 16)
    _, tf = normalize_to_unit_cube(np.vstack([unproject(d, cam), [[0, 0, 2.5]]]))
    s = freespace_samples(d, cam, tf, 40000, np.random.default_rng(1))
    z = tf.inverse(s.points)[:, 2]
    reach_z = 2.0 - 0.02 / tf.scale
    frac = np.mean(z < 0.5 * reach_z)
    assert frac == pytest.approx(1 / 8, abs=0.01)


def test_subsample_sizes():
    s = SampleSet(np.zeros((1000, 3)), np.zeros(1000), np.zeros(1000))
    assert len(subsample(s, 0.1, np.random.default_rng(0))) == 100
    assert len(subsample(s, 1.0, np.random.default_rng(0))) == 1000
    assert len(subsample(SampleSet(np.zeros((7, 3)), np.zeros(7), np.zeros(7)), 0.1,
                         np.random.default_rng(0))) == math.ceil(0.7)
    with pytest.raises(ValueError):
        subsample(s, 0.0)


def test_subsample_full_fraction_is_a_permutation():
    pts = np.arange(30.0).reshape(10, 3)
    s = SampleSet(pts, np.arange(10) % 2, np.zeros(10))
    out = subsample([s], 1.0, np.random.default_rng(3))
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, pts))
    # labels travel with their points
    np.testing.assert_array_equal(out.labels, (out.points[:, 0] / 3) % 2)


def test_subsample_seeds_differ():
    # two independent 10% draws from 1000 coincide with probability 1/C(1000,100)
    s = SampleSet(np.arange(3000.0).reshape(1000, 3), np.zeros(1000), np.zeros(1000))
    a = subsample(s, 0.1, np.random.default_rng(0)).points
    b = subsample(s, 0.1, np.random.default_rng(1)).points
    assert set(map(tuple, a)) != set(map(tuple, b))


@pytest.mark.parametrize("name", ["box", "box_with_hole", "shelf"])
def test_sample_labels_agree_with_analytic_occupancy(name):
    scene = builtin_scene(name)
    d, cam = scene_to_depth_input(scene)
    ss = build_scene_samples(d, cam, freespace_count=20000, seed=0)
    raw = ss.transform.inverse(ss.reservoir.points)
    occ = analytic_occupancy(scene, raw)
    k = ss.reservoir.kind
    # the inside band may leave the solid only at silhouette pixels
    interior = ~edge_pixels(d)[d.mask]
    assert np.mean(occ[k == SURFACE_IN][interior] == 1) >= 0.99
    assert np.mean(occ[k != SURFACE_IN] == 0) >= 0.99


def test_scene_samples_are_normalized():
    d, cam = scene_to_depth_input(builtin_scene("l_shape"))
    ss = build_scene_samples(d, cam, freespace_count=1000)
    assert np.all(np.abs(ss.cloud) <= 0.5 + 1e-9)
    assert len(ss.surface_in) == d.mask.sum()
