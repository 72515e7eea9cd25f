"""Configuration grids over (K_total, K_neg) and the two selection strategies.

* select-then-refine (``s2r``): every config gets a short warmup fit, the one
  misclassifying the fewest samples is refined and returned.
* refine-then-select (``r2s``): every config is warmed up and refined, then
  the model whose render has the lowest AbsRel wins.

The warmup fit stands in for a learned network's start point; only the
selection mechanism is reproduced, not a trained predictor.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import CsgModel, csg_indicator
from .errors import CsgFitError
from .metrics import MetricReport, evaluate
from .optim import FitConfig, fit
from .render import MarchConfig, render
from .sampling import Camera, SampleSet, SceneSamples, build_scene_samples
from .scenegen import AnalyticScene, analytic_render, scene_to_depth_input, segmentation_ids

log = logging.getLogger(__name__)

DEFAULT_K_TOTALS = (12, 24, 36)
EVAL_DRAW = 100_000
EVAL_SEED = 2024


def config_grid(k_totals=DEFAULT_K_TOTALS, spacing: int = 4) -> list:
    """``(k_total, k_neg)`` pairs with ``k_neg`` in ``0, spacing, ..., k_total - spacing``."""
    grid = []
    for kt in k_totals:
        kt = int(kt)
        if kt < 2 * spacing or kt % spacing:
            raise ValueError(f"k_total must be >= {2 * spacing} and divisible by {spacing}, "
                             f"got {kt}")
        grid.extend((kt, kn) for kn in range(0, kt, spacing))
    return grid


def member_seed(scene_seed: int, k_total: int, k_neg: int) -> int:
    """Independent, reproducible seed for one ensemble member."""
    return int(np.random.SeedSequence([scene_seed, k_total, k_neg]).generate_state(1)[0])


@dataclass
class EnsembleTask:
    """One scene as the ensemble sees it: samples plus GT for scoring."""

    name: str
    samples: SceneSamples
    camera: Camera
    gt_depth: np.ndarray
    gt_normals: np.ndarray | None = None
    gt_seg: np.ndarray | None = None
    seed: int = 0

    @property
    def gt_mask(self) -> np.ndarray:
        return np.isfinite(self.gt_depth) & (self.gt_depth > 0)


def task_from_scene(scene: AnalyticScene, resolution=(64, 64), seed: int = 0,
                    freespace_count: int = 50_000) -> EnsembleTask:
    """Ensemble task for a synthetic scene with its exact GT rasters."""
    cam = scene.camera(resolution)
    gt = analytic_render(scene, cam)
    depth, cam = scene_to_depth_input(scene, cam)
    samples = build_scene_samples(depth, cam, freespace_count=freespace_count, seed=seed)
    return EnsembleTask(scene.name, samples, cam, np.where(gt.hit_mask, gt.depth, np.nan),
                        gt.normals, segmentation_ids(gt.labels), seed)


@dataclass
class FitReport:
    k_total: int
    k_neg: int
    seed: int
    final_loss: float | None = None
    misclassification: float | None = None
    metrics: MetricReport | None = None
    timing: dict = field(default_factory=dict)
    error: str | None = None
    model: CsgModel | None = field(default=None, repr=False)

    @property
    def config(self):
        return (self.k_total, self.k_neg)

    @property
    def ok(self) -> bool:
        return self.error is None

    def as_dict(self) -> dict:
        return {
            "k_total": self.k_total, "k_neg": self.k_neg, "seed": self.seed,
            "final_loss": self.final_loss, "misclassification": self.misclassification,
            "metrics": None if self.metrics is None else self.metrics.as_dict(),
            "timing": dict(self.timing), "error": self.error,
        }


@dataclass
class EnsembleReport:
    strategy: str
    chosen: tuple
    selection_metric: float
    candidates: list
    model: CsgModel | None = field(default=None, repr=False)
    metrics: MetricReport | None = None
    wall_time: float = 0.0
    scene: str = ""

    def chosen_report(self) -> FitReport:
        return next(c for c in self.candidates if c.config == self.chosen)

    def rows(self) -> list:
        """Histogram-ready rows, one per grid config (1 for the chosen one)."""
        return [{"k_total": c.k_total, "k_neg": c.k_neg,
                 "chosen": int(c.config == self.chosen)} for c in self.candidates]

    def as_dict(self) -> dict:
        return {
            "scene": self.scene, "strategy": self.strategy,
            "chosen": list(self.chosen), "selection_metric": self.selection_metric,
            "metrics": None if self.metrics is None else self.metrics.as_dict(),
            "wall_time": self.wall_time,
            "candidates": [c.as_dict() for c in self.candidates],
            "rows": self.rows(),
        }


def evaluation_draw(samples: SceneSamples, count: int = EVAL_DRAW,
                    seed: int = EVAL_SEED) -> SampleSet:
    """Fixed evaluation subset (the whole reservoir when it is smaller)."""
    res = samples.reservoir
    if len(res) <= count:
        return res
    return res.take(np.sort(np.random.default_rng(seed).choice(len(res), count, replace=False)))


def misclassification(model: CsgModel, draw: SampleSet) -> float:
    """Share of samples whose rounded indicator disagrees with the label."""
    occ = csg_indicator(model, draw.points)
    return float(np.mean(np.round(occ) != draw.labels))


def score(model: CsgModel, task: EnsembleTask, march: MarchConfig = MarchConfig()) -> MetricReport:
    buffers = render(model, task.camera, march)
    return evaluate(buffers, task.gt_depth, task.gt_normals, task.gt_seg, task.gt_mask)


def _member_config(base: FitConfig, task: EnsembleTask, k_total: int, k_neg: int,
                   steps: int) -> FitConfig:
    return replace(base, k_total=k_total, k_neg=k_neg, steps=steps,
                   seed=member_seed(task.seed, k_total, k_neg))


def _run_member(job):
    """Warmup (and optional refine + scoring) for one config; never raises."""
    task, base, k_total, k_neg, warmup, refine, do_score, march = job
    cfg = _member_config(base, task, k_total, k_neg, warmup)
    rep = FitReport(k_total, k_neg, cfg.seed)
    try:
        t0 = time.perf_counter()
        model, trace = fit(task.samples, cfg)
        rep.timing["warmup"] = time.perf_counter() - t0
        if refine:
            t0 = time.perf_counter()
            model, trace = fit(task.samples, replace(cfg, steps=refine), warm_start=model)
            rep.timing["refine"] = time.perf_counter() - t0
        rep.final_loss = float(trace.total[-1])
        t0 = time.perf_counter()
        rep.misclassification = misclassification(model, evaluation_draw(task.samples))
        if do_score:
            rep.metrics = score(model, task, march)
        rep.timing["evaluate"] = time.perf_counter() - t0
        rep.model = model
    except (CsgFitError, FloatingPointError, ValueError) as e:
        rep.error = f"{type(e).__name__}: {e}"
        log.warning("config (%d, %d) failed: %s", k_total, k_neg, rep.error)
    return rep


def _map(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_run_member(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_member, jobs))


def _check_grid(grid):
    grid = [tuple(map(int, g)) for g in grid]
    if not grid:
        raise ValueError("configuration grid is empty")
    return grid


def select_then_refine(task: EnsembleTask, grid, warmup_steps: int = 300,
                       refine_steps: int = 200, base: FitConfig = FitConfig(),
                       workers: int = 1, march: MarchConfig = MarchConfig()) -> EnsembleReport:
    """Warm up every config, refine only the lowest-misclassification one."""
    grid = _check_grid(grid)
    start = time.perf_counter()
    jobs = [(task, base, kt, kn, warmup_steps, 0, False, march) for kt, kn in grid]
    cands = _map(jobs, workers)
    ok = [c for c in cands if c.ok]
    if not ok:
        raise CsgFitError("every warmup fit failed")
    best = min(ok, key=lambda c: c.misclassification)  # first in grid order on ties
    t0 = time.perf_counter()
    cfg = _member_config(base, task, best.k_total, best.k_neg, refine_steps)
    model, trace = fit(task.samples, cfg, warm_start=best.model)
    best.timing["refine"] = time.perf_counter() - t0
    best.final_loss = float(trace.total[-1])
    best.model = model
    best.metrics = score(model, task, march)
    return EnsembleReport("s2r", best.config, best.misclassification, cands, model,
                          best.metrics, time.perf_counter() - start, task.name)


def refine_then_select(task: EnsembleTask, grid, refine_steps: int = 200,
                       warmup_steps: int = 300, base: FitConfig = FitConfig(),
                       workers: int = 1, march: MarchConfig = MarchConfig()) -> EnsembleReport:
    """Warm up and refine every config, keep the one with the lowest AbsRel."""
    grid = _check_grid(grid)
    start = time.perf_counter()
    jobs = [(task, base, kt, kn, warmup_steps, refine_steps, True, march) for kt, kn in grid]
    cands = _map(jobs, workers)
    ok = [c for c in cands if c.ok]
    if not ok:
        raise CsgFitError("every configuration failed")
    best = min(ok, key=lambda c: c.metrics.absrel)
    return EnsembleReport("r2s", best.config, best.metrics.absrel, cands, best.model,
                          best.metrics, time.perf_counter() - start, task.name)


@dataclass
class RatioReport:
    rows: list  # dicts with k_total, k_neg, count
    mean_ratio: float
    scenes: int

    def as_dict(self) -> dict:
        return {"rows": self.rows, "mean_ratio": self.mean_ratio, "scenes": self.scenes}


def ratio_report(reports, grid=None) -> RatioReport:
    """Histogram of chosen configs and the mean chosen ``k_neg / k_total``."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one ensemble report")
    if grid is None:
        seen = {}
        for r in reports:
            for c in r.candidates:
                seen.setdefault(c.config, None)
        grid = list(seen)
    grid = [tuple(g) for g in grid]
    counts = {g: 0 for g in grid}
    for r in reports:
        counts[tuple(r.chosen)] = counts.get(tuple(r.chosen), 0) + 1
    rows = [{"k_total": kt, "k_neg": kn, "count": counts[(kt, kn)]} for kt, kn in grid]
    ratio = float(np.mean([r.chosen[1] / r.chosen[0] for r in reports]))
    return RatioReport(rows, ratio, len(reports))
