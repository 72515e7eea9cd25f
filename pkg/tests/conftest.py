import functools
import re

import numpy as np
import pytest

from csgfit.optim import FitConfig, fit
from csgfit.sampling import build_scene_samples
from csgfit.scenegen import analytic_render, builtin_scene, scene_to_depth_input


@functools.lru_cache(maxsize=None)
def scene_bundle(name, resolution=(64, 64)):
    """(scene, camera, gt buffers, scene samples) for a builtin scene, cached per session."""
    scene = builtin_scene(name)
    cam = scene.camera(resolution)
    gt = analytic_render(scene, cam)
    depth, cam = scene_to_depth_input(scene, cam)
    return scene, cam, gt, build_scene_samples(depth, cam)


@functools.lru_cache(maxsize=None)
def cached_fit(name, k_total, k_neg, steps, seed):
    _, _, _, samples = scene_bundle(name)
    return fit(samples, FitConfig(k_total=k_total, k_neg=k_neg, steps=steps, seed=seed))


@pytest.fixture(scope="session")
def box_bundle():
    return scene_bundle("box")


@pytest.fixture(scope="session")
def box_fit():
    """Single-primitive random-start fit of the box scene at the default budget."""
    return cached_fit("box", 1, 0, 2000, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def gradient_check(seed, n_samples=64, h=1e-5):
    """Worst relative error of the analytic gradient against FP64 central differences.

    Builds a random model with ``k_total <= 8`` and a random labelled batch.
    Coordinates with ``|g_fd| <= 1e-6`` are skipped.
    """
    from csgfit.losses import SurfaceAnchors, total_loss
    from csgfit.optim import grad_total_loss, init_random, model_from_vector, model_vector
    from csgfit.sampling import SampleSet

    rng = np.random.default_rng(seed)
    kt = int(rng.integers(1, 9))
    kn = int(rng.integers(0, kt))
    cloud = rng.uniform(-0.5, 0.5, (200, 3))
    m = init_random(FitConfig(k_total=kt, k_neg=kn, seed=seed), cloud, rng)
    pts = rng.uniform(-0.4, 0.4, (n_samples, 3))
    s = SampleSet(pts, (rng.random(n_samples) < 0.5).astype(float),
                  rng.integers(0, 3, n_samples))
    anchors = SurfaceAnchors.from_samples(s)
    g = grad_total_loss(m, s, anchors=anchors)
    theta = model_vector(m)
    fd = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        up = total_loss(model_from_vector(theta + e, m), s, anchors=anchors).total
        down = total_loss(model_from_vector(theta - e, m), s, anchors=anchors).total
        fd[i] = (up - down) / (2 * h)
    sel = np.abs(fd) > 1e-6
    if not sel.any():
        return 0.0
    return float(np.max(np.abs(g[sel] - fd[sel]) / np.abs(fd[sel])))


CRITERIA = {
    1: "gradient correctness",
    2: "indicator semantics",
    3: "raymarch vs oracle",
    4: "negative primitive on box_with_hole",
    5: "random-start viability",
    6: "warm-start advantage",
    7: "ensembling dominance",
    8: "label-count bound",
    9: "schedule and format exactness",
    10: "metric unit tests",
}
_ACCEPTANCE = re.compile(r"test_acceptance\.py::test_c(\d+)_")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with measured values."""
    results = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            match = _ACCEPTANCE.search(getattr(rep, "nodeid", ""))
            if not match or (rep.when != "call" and outcome == "passed"):
                continue
            entry = results.setdefault(int(match.group(1)), {"ok": True, "ran": False, "notes": []})
            entry["ran"] |= rep.when == "call"
            entry["ok"] &= outcome == "passed"
            entry["notes"] += [v for k, v in rep.user_properties if k == "measured"]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num, title in CRITERIA.items():
        entry = results.get(num)
        if entry is None:
            status, notes = "NOT RUN", []
        else:
            status = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
            notes = entry["notes"]
        terminalreporter.write_line(f"C{num:<2d} {status:4s}  {title}")
        for note in notes:
            terminalreporter.write_line(f"          {note}")
