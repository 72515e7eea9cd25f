import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from conftest import scene_bundle
from csgfit.core import (
    ConvexPrimitive, CsgModel, SceneTransform, csg_indicator, max_label_count, pack_model,
)
from csgfit.render import BEAUTY, MarchConfig, march_ray, march_rays, render
from csgfit.sampling import Camera
from csgfit.scenegen import SCENE_NAMES, analytic_occupancy

MIN_STEP = 1e-3


def unit_cube(delta=1e-3, sigma=200.0):
    return CsgModel([ConvexPrimitive.box((0, 0, 0), (0.5, 0.5, 0.5), delta)], (), sigma)


def cube_with_hole(delta=1e-3):
    return CsgModel([ConvexPrimitive.box((0, 0, 0), (0.5, 0.5, 0.5), delta)],
                    [ConvexPrimitive.box((0, 0, 0), (0.2, 0.2, 0.75), delta)], 200.0)


def hand_model(name):
    scene, cam, gt, samples = scene_bundle(name)
    return scene.to_model(delta=1e-3, sigma=200.0, transform=samples.transform), cam, gt


def exact_cube_hit(origin, direction, m, lo=0.0, hi=2.0, iters=60):
    """Bisection on the rounded indicator along the ray, from a coarse bracket."""
    ts = np.linspace(lo, hi, 20001)
    occ = csg_indicator(m, origin + ts[:, None] * direction) > 0.5
    k = int(np.argmax(occ))
    a, b = ts[k - 1], ts[k]
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if csg_indicator(m, origin + mid * direction) > 0.5:
            b = mid
        else:
            a = mid
    return 0.5 * (a + b)


# -- configuration ------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(min_step=0.0), dict(step_factor=1.0), dict(step_factor=0.0)])
def test_invalid_march_config(kwargs):
    with pytest.raises(ValueError):
        MarchConfig(**kwargs)


def test_march_defaults():
    cfg = MarchConfig()
    assert (cfg.min_step, cfg.step_factor, cfg.max_steps, cfg.halving_iters) == (1e-3, 0.8, 512, 16)
    assert BEAUTY.min_step == 1e-4


# -- single rays --------------------------------------------------------------

def test_ray_through_empty_space_misses():
    assert march_ray(unit_cube(), (0, 0, -2.0), (0, 1.0, 0)) is None


def test_frontal_ray_hits_face():
    m = unit_cube(delta=1e-3)
    origin, direction = np.array([0, 0, -1.0]), np.array([0, 0, 1.0])
    hit = march_ray(m, origin, direction)
    oracle = exact_cube_hit(origin, direction, m)
    assert abs(hit.t - oracle) <= 2 * MIN_STEP + 3e-3
    assert abs(hit.t - 0.5) <= 2 * MIN_STEP + 3e-3


def test_ray_through_hole_never_stops_inside_it():
    m = cube_with_hole()
    hit = march_ray(m, (0.05, -0.03, -2.0), (0, 0, 1.0))
    assert hit is None


def test_ray_direction_must_be_unit():
    with pytest.raises(ValueError):
        march_ray(unit_cube(), (0, 0, -2), (0, 0, 2.0))


def test_bisection_bracket_shrinks():
    m = cube_with_hole()
    rng = np.random.default_rng(0)
    dirs = rng.normal([0, 0, 1], 0.25, (300, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.array([0.1, 0.05, -2.0])
    cfg = MarchConfig()
    path = []
    pos, neg = pack_model(m)
    t, hit, lo, hi = march_rays(pos, neg, origin, dirs, cfg, 4.0, path)
    assert hit.sum() > 100
    last = {}
    for idx, ts in path:
        for i, tv in zip(idx, ts):
            last.setdefault(i, []).append(tv)
    for i in np.flatnonzero(hit):
        ts = last[i]
        initial = ts[-1] - ts[-2] if len(ts) > 1 else ts[-1]
        assert lo[i] <= t[i] <= hi[i]
        assert hi[i] - lo[i] <= initial * 2.0 ** -cfg.halving_iters + 1e-15


# -- full renders -------------------------------------------------------------

def test_cube_filling_view_is_a_flat_plateau():
    m = unit_cube()
    cam = Camera(400.0, 400.0, 8.0, 8.0, 16, 16)
    # camera origin maps to (0, 0, -1.5) in the model frame
    m = CsgModel(m.positives, (), m.sharpness_sigma, SceneTransform(1.0, (0.0, 0.0, -1.5)))
    buf = render(m, cam)
    assert buf.hit_mask.all()
    assert np.ptp(buf.depth) < 1e-3
    assert abs(buf.depth.mean() - 1.0) < 2 * MIN_STEP + 3e-3
    cos = buf.normals.reshape(-1, 3) @ np.array([0, 0, -1.0])
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 0.5


@pytest.mark.parametrize("name", SCENE_NAMES)
def test_render_buffers_are_consistent(name):
    m, cam, gt = hand_model(name)
    buf = render(m, cam)
    assert np.isfinite(buf.depth[buf.hit_mask]).all()
    assert np.isinf(buf.depth[~buf.hit_mask]).all()
    n = np.linalg.norm(buf.normals[buf.hit_mask], axis=1)
    assert np.allclose(n, 1.0, atol=1e-6)
    assert buf.distinct_labels() <= max_label_count(6, m.k_total, m.k_neg)
    assert np.isfinite(buf.far_depth) and buf.far_depth > np.nanmax(gt.depth[gt.hit_mask])


def test_cube_scene_absrel_against_analytic_depth():
    m, cam, gt = hand_model("box")
    buf = render(m, cam)
    mask = gt.hit_mask
    pred = np.where(buf.hit_mask, buf.depth, buf.far_depth)
    assert np.mean(np.abs(pred[mask] - gt.depth[mask]) / gt.depth[mask]) < 0.01


@pytest.mark.parametrize("name", SCENE_NAMES)
def test_march_never_tunnels(name):
    m, cam, _ = hand_model(name)
    pos, neg = pack_model(m)
    tf = m.scene_transform
    origin = tf.apply(np.zeros(3))
    dirs = cam.ray_directions().reshape(-1, 3)[::3]
    path = []
    t_max = float(np.linalg.norm(origin)) + 2
    march_rays(pos, neg, origin, dirs, MarchConfig(min_step=MIN_STEP), t_max, path)
    idx = np.concatenate([p[0] for p in path])
    ts = np.concatenate([p[1] for p in path])
    occ = csg_indicator(m, origin + ts[:, None] * dirs[idx])
    # the final evaluation of a hit ray is the first point inside; drop it
    inside = occ >= 0.5 + 1e-3
    last_eval = {}
    for k, i in enumerate(idx):
        last_eval[i] = k
    allowed = np.zeros(len(idx), dtype=bool)
    allowed[list(last_eval.values())] = True
    assert not np.any(inside & ~allowed)


@pytest.mark.parametrize("name", SCENE_NAMES)
def test_smaller_min_step_never_hurts_much(name):
    m, cam, gt = hand_model(name)
    coarse = render(m, cam, MarchConfig(min_step=1e-3))
    fine = render(m, cam, MarchConfig(min_step=1e-4))
    both = gt.hit_mask & coarse.hit_mask & fine.hit_mask
    e_coarse = np.abs(coarse.depth[both] - gt.depth[both])
    e_fine = np.abs(fine.depth[both] - gt.depth[both])
    assert np.all(e_fine <= e_coarse + 1e-3)


@pytest.mark.parametrize("name", SCENE_NAMES)
def test_normals_on_flat_faces(name):
    m, cam, gt = hand_model(name)
    buf = render(m, cam)
    seg = np.where(gt.hit_mask, gt.labels[..., 1] * 6 + gt.labels[..., 0], -1)
    interior = np.zeros_like(gt.hit_mask)
    structure = np.ones((7, 7), dtype=bool)  # 3 px in every direction
    for sid in np.unique(seg[seg >= 0]):
        interior |= binary_erosion(seg == sid, structure)
    interior &= buf.hit_mask
    assert interior.sum() > 50
    cos = np.sum(buf.normals[interior] * gt.normals[interior], axis=1)
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 1.0


def test_hole_pixels_are_not_inside_the_solid():
    m, cam, gt = hand_model("box_with_hole")
    buf = render(m, cam)
    tf = m.scene_transform
    scene = scene_bundle("box_with_hole")[0]
    dirs = cam.ray_directions()
    pts = dirs[buf.hit_mask] * (buf.depth[buf.hit_mask] / dirs[buf.hit_mask][:, 2])[:, None]
    # a point just in front of every reported hit is free space
    before = analytic_occupancy(scene, pts - 0.01 / tf.scale * dirs[buf.hit_mask])
    assert np.mean(before == 0) > 0.99
