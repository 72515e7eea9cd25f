"""Command-line entry point: ``csgfit {synth,fit,render,eval,ensemble}``.

Exit codes: 0 success, 1 domain error (bad inputs, failed fits), 2 usage
error.  Every command writes a JSON report next to its outputs and echoes
the numeric results as JSON on stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from .ensemble import EnsembleTask, config_grid, ratio_report, refine_then_select, select_then_refine
from .errors import CsgFitError
from .metrics import MetricReport, evaluate
from .optim import fit
from .render import RenderBuffers, render
from .sampling import build_scene_samples
from .scenegen import SCENE_NAMES, analytic_render, builtin_scene, segmentation_ids

log = logging.getLogger("csgfit")


def artifact_version() -> str:
    """Package version plus a short hash of the installed sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


class UsageError(Exception):
    pass


def _resolution(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 2 or h < 2:
        raise argparse.ArgumentTypeError("resolution must be at least 2x2")
    return w, h


def _grid(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--workers", type=int, default=None,
                        help="worker pool size (default: $CSGFIT_WORKERS or 1)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="csgfit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a builtin analytic scene")
    s.add_argument("--scene", required=True, choices=SCENE_NAMES)
    s.add_argument("--res", type=_resolution, default=(64, 64), metavar="WxH")
    s.add_argument("--view", choices=("three_quarter", "frontal"), default="three_quarter")
    s.add_argument("--out", required=True)

    def inputs(q):
        q.add_argument("--input", help="directory holding depth.pfm and camera.json")
        q.add_argument("--depth", help="depth raster (PFM or CDPT)")
        q.add_argument("--camera", help="camera JSON")

    f = sub.add_parser("fit", parents=[common], help="fit a CSG model to a depth image")
    inputs(f)
    f.add_argument("--k-total", type=int)
    f.add_argument("--k-neg", type=int)
    f.add_argument("--faces", type=int)
    f.add_argument("--steps", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--freespace", type=int, default=50_000, help="free-space reservoir size")
    f.add_argument("--warm-start", metavar="MODEL", help="model JSON to polish")
    f.add_argument("--out", required=True)

    r = sub.add_parser("render", parents=[common], help="raymarch a model")
    r.add_argument("--model", required=True)
    r.add_argument("--camera", required=True)
    r.add_argument("--min-step", type=float)
    r.add_argument("--out", required=True)

    e = sub.add_parser("eval", parents=[common], help="score a render against ground truth")
    e.add_argument("--pred", required=True, help="render output directory")
    e.add_argument("--gt-depth", required=True)
    e.add_argument("--gt-normals")
    e.add_argument("--gt-seg", help="ground-truth label PPM")
    e.add_argument("--meters-per-unit", type=float, default=1.0)
    e.add_argument("--out", help="write the report JSON here")

    n = sub.add_parser("ensemble", parents=[common], help="fit a config grid and select")
    inputs(n)
    n.add_argument("--gt-depth", help="depth used for AbsRel (default: the input depth)")
    n.add_argument("--strategy", choices=("s2r", "r2s"), default="r2s")
    n.add_argument("--grid", type=_grid, default=[12, 24, 36], metavar="K,K,...")
    n.add_argument("--warmup", type=int, default=300)
    n.add_argument("--refine", type=int, default=200)
    n.add_argument("--seed", type=int)
    n.add_argument("--freespace", type=int, default=50_000)
    n.add_argument("--out", required=True, help="report JSON path")
    return p


def _run_config(args) -> io.RunConfig:
    cfg = io.load_run_config(args.config) if args.config else io.RunConfig()
    workers = args.workers if args.workers is not None else io.env_workers(cfg.workers)
    if workers < 1:
        raise UsageError("--workers must be >= 1")
    return replace(cfg, workers=workers)


def _resolve_inputs(args, cfg: io.RunConfig):
    depth, camera = args.depth or cfg.depth, args.camera or cfg.camera
    if args.input:
        depth = depth or str(Path(args.input) / "depth.pfm")
        camera = camera or str(Path(args.input) / "camera.json")
    if not depth or not camera:
        raise UsageError("need --input DIR or both --depth and --camera")
    return io.read_depth(depth), io.read_camera(camera), depth, camera


def _header(cfg: io.RunConfig, command: str) -> dict:
    return {"command": command, "version": artifact_version(), "seed": cfg.seed,
            "workers": cfg.workers, "run_config": cfg.as_dict()}


def _emit(obj):
    print(io.dumps_json(obj), end="")


def cmd_synth(args, cfg):
    out = io.prepare_out_dir(args.out, args.force)
    scene = builtin_scene(args.scene, args.view)
    cam = scene.camera(args.res)
    gt = analytic_render(scene, cam)
    io.write_pfm(out / "depth.pfm", gt.depth)
    io.write_pfm(out / "normals.pfm", gt.normals)
    io.write_labels(out / "labels.ppm", gt.labels)
    io.write_camera(out / "camera.json", cam)
    report = _header(cfg, "synth") | {
        "scene": args.scene, "view": args.view, "resolution": list(args.res),
        "hit_pixels": int(gt.hit_mask.sum()),
        "segments": int(len(np.unique(segmentation_ids(gt.labels)[gt.hit_mask]))),
    }
    io.write_json(out / "report.json", report)
    _emit(report)


def cmd_fit(args, cfg):
    changes = {"k_total": args.k_total, "k_neg": args.k_neg, "faces": args.faces,
               "steps": args.steps, "seed": args.seed}
    cfg = io.with_overrides(cfg, **changes)  # validates before any input is read
    depth, cam, depth_path, cam_path = _resolve_inputs(args, cfg)
    cfg = replace(cfg, depth=depth_path, camera=cam_path, out=args.out)
    warm = io.read_model(args.warm_start) if args.warm_start else None
    out = io.prepare_out_dir(args.out, args.force)
    samples = build_scene_samples(depth, cam, freespace_count=args.freespace, seed=cfg.seed)
    model, trace = fit(samples, cfg.fit, warm_start=warm)
    io.write_model(out / "model.json", model)
    io.write_trace_csv(out / "trace.csv", trace)
    report = _header(cfg, "fit") | {
        "k_total": model.k_total, "k_neg": model.k_neg, "steps": len(trace),
        "final_loss": float(trace.total[-1]), "wall_time": trace.wall_time,
        "warm_start": args.warm_start, "freespace": args.freespace,
    }
    io.write_json(out / "report.json", report)
    _emit(report)


def write_render(out: Path, buffers: RenderBuffers):
    io.write_pfm(out / "depth.pfm", buffers.depth)
    io.write_pfm(out / "normals.pfm", buffers.normals)
    io.write_labels(out / "labels.ppm", buffers.labels)


def cmd_render(args, cfg):
    march = cfg.march if args.min_step is None else replace(cfg.march, min_step=args.min_step)
    cfg = replace(cfg, march=march)
    model = io.read_model(args.model)
    cam = io.read_camera(args.camera)
    out = io.prepare_out_dir(args.out, args.force)
    buffers = render(model, cam, march)
    write_render(out, buffers)
    report = _header(cfg, "render") | {
        "model": args.model, "hit_pixels": int(buffers.hit_mask.sum()),
        "distinct_labels": buffers.distinct_labels(), "far_depth": buffers.far_depth,
    }
    io.write_json(out / "report.json", report)
    _emit(report)


def _load_render(pred_dir) -> RenderBuffers:
    pred = Path(pred_dir)
    depth, _ = io.read_pfm(pred / "depth.pfm")
    normals, _ = io.read_pfm(pred / "normals.pfm")
    meta = io.read_json(pred / "report.json")
    far = meta.get("far_depth")
    labels = io.read_segmentation(pred / "labels.ppm")
    hit = np.isfinite(depth)
    return RenderBuffers(depth.astype(np.float64), normals.astype(np.float64),
                         labels[..., None], hit, np.inf if far is None else float(far))


def cmd_eval(args, cfg):
    buffers = _load_render(args.pred)
    gt_depth, _ = io.read_pfm(args.gt_depth)
    gt_normals = io.read_pfm(args.gt_normals)[0] if args.gt_normals else None
    gt_seg = io.read_segmentation(args.gt_seg) if args.gt_seg else None
    report = evaluate(buffers, gt_depth.astype(np.float64), gt_normals, gt_seg,
                      meters_per_unit=args.meters_per_unit)
    units = {"mean_dist": "input depth units, plain per-pixel |pred - gt|",
             "median_dist": "input depth units, plain per-pixel |pred - gt|",
             "auc": f"threshold in cm, meters_per_unit={args.meters_per_unit}",
             "normal_mean_deg": "degrees", "normal_median_deg": "degrees"}
    doc = _header(cfg, "eval") | {"pred": args.pred, "gt_depth": args.gt_depth,
                                  "metrics": report.as_dict(), "units": units}
    if args.out:
        io.write_json(args.out, doc)
    print(MetricReport.tsv_header())
    print(report.tsv())
    _emit(report.as_dict())


def cmd_ensemble(args, cfg):
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    grid = config_grid(args.grid)
    depth, cam, depth_path, cam_path = _resolve_inputs(args, cfg)
    gt = io.read_depth(args.gt_depth).values if args.gt_depth else depth.values
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists (use --force)")
    samples = build_scene_samples(depth, cam, freespace_count=args.freespace, seed=cfg.seed)
    task = EnsembleTask(Path(depth_path).stem, samples, cam, np.where(depth.mask, gt, np.nan),
                        seed=cfg.seed)
    base = replace(cfg.fit, seed=cfg.seed)
    if args.strategy == "s2r":
        rep = select_then_refine(task, grid, args.warmup, args.refine, base, cfg.workers,
                                 cfg.march)
    else:
        rep = refine_then_select(task, grid, args.refine, args.warmup, base, cfg.workers,
                                 cfg.march)
    cfg = replace(cfg, depth=depth_path, camera=cam_path, out=str(out))
    doc = _header(cfg, "ensemble") | {"grid": [list(g) for g in grid],
                                      "warmup": args.warmup, "refine": args.refine,
                                      "report": rep.as_dict(),
                                      "histogram": ratio_report([rep], grid).as_dict()}
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_json(out, doc)
    io.write_model(out.with_suffix(".model.json"), rep.model)
    _emit({"chosen": list(rep.chosen), "selection_metric": rep.selection_metric,
           "absrel": rep.metrics.absrel})


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "render": cmd_render, "eval": cmd_eval,
            "ensemble": cmd_ensemble}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: 0 for --help/--version, 2 for usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"csgfit: error: {e}", file=sys.stderr)
        return 2
    except (CsgFitError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"csgfit: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
