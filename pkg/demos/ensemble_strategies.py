"""Compare select-then-refine with refine-then-select on the builtin suite.

Prints each strategy's pick per scene with its AbsRel and timing, then the
histogram of R->S choices with the mean K-/K ratio.
Defaults use a reduced grid so the demo finishes in a few minutes.

    python demos/ensemble_strategies.py [--grid 8,12] [--warmup 300] [--refine 200]
"""

import argparse

from csgfit.ensemble import (
    config_grid, ratio_report, refine_then_select, select_then_refine, task_from_scene,
)
from csgfit.scenegen import SCENE_NAMES, builtin_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="8,12")
    ap.add_argument("--warmup", type=int, default=300)
    ap.add_argument("--refine", type=int, default=200)
    ap.add_argument("--res", type=int, default=48)
    args = ap.parse_args()
    grid = config_grid([int(k) for k in args.grid.split(",")])

    r2s_reports = []
    print(f"{'scene':24s} {'S->R':>10s} {'AbsRel':>7s} {'time':>6s}   "
          f"{'R->S':>10s} {'AbsRel':>7s} {'time':>6s}")
    for name in SCENE_NAMES:
        task = task_from_scene(builtin_scene(name), (args.res, args.res))
        s2r = select_then_refine(task, grid, args.warmup, args.refine)
        r2s = refine_then_select(task, grid, args.refine, args.warmup)
        r2s_reports.append(r2s)
        print(f"{name:24s} {str(s2r.chosen):>10s} {s2r.metrics.absrel:7.4f} "
              f"{s2r.wall_time:5.1f}s   {str(r2s.chosen):>10s} {r2s.metrics.absrel:7.4f} "
              f"{r2s.wall_time:5.1f}s")

    hist = ratio_report(r2s_reports, grid)
    print("\nR->S choices:")
    for row in hist.rows:
        print(f"  ({row['k_total']:2d}, {row['k_neg']:2d})  {'#' * row['count']}")
    print(f"mean K-/K_total = {hist.mean_ratio:.3f}")


if __name__ == "__main__":
    main()
