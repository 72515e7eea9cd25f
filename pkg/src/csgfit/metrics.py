"""Scoring of rendered buffers against ground truth.

Depth metrics replace non-hit predictions with a far-plane depth, so a model
that renders nothing is penalized instead of silently excluded.  Distances
(``mean_dist``/``median_dist``) are plain per-pixel ``|pred - gt|`` in scene
units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError

AUC_THRESHOLDS_CM = (5, 10, 20, 50)


def _effective_mask(gt, mask):
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.isfinite(gt) & (gt > 0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ValueError(f"mask shape {mask.shape} != depth shape {gt.shape}")
        valid &= mask
    if not valid.any():
        raise EvaluationError("empty evaluation mask")
    return gt, valid


def _filled(pred, gt, far_depth):
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    miss = ~np.isfinite(pred)
    if miss.any():
        if far_depth is None or not np.isfinite(far_depth):
            raise EvaluationError("prediction has misses but no finite far_depth was given")
        pred = np.where(miss, far_depth, pred)
    return pred


def depth_errors(pred, gt, mask=None, far_depth=None) -> np.ndarray:
    """Absolute per-pixel depth errors on the effective mask (1-D)."""
    gt, valid = _effective_mask(gt, mask)
    pred = _filled(pred, gt, far_depth)
    return np.abs(pred[valid] - gt[valid])


def absrel(pred, gt, mask=None, far_depth=None) -> float:
    """Mean of ``|pred - gt| / gt`` over valid pixels."""
    gt, valid = _effective_mask(gt, mask)
    pred = _filled(pred, gt, far_depth)
    return float(np.mean(np.abs(pred[valid] - gt[valid]) / gt[valid]))


def auc_at(pred, gt, mask=None, n_cm: float = 5, far_depth=None,
           meters_per_unit: float = 1.0) -> float:
    """Fraction of valid pixels whose depth error is within ``n_cm`` centimeters."""
    err = depth_errors(pred, gt, mask, far_depth) * meters_per_unit
    # tolerance absorbs decimal noise like 0.05 - 1e-17 on exact thresholds
    return float(np.mean(err <= n_cm / 100.0 + 1e-12))


def normal_errors(pred_normals, gt_normals, mask=None):
    """Mean and median angle between unit normal fields, in degrees."""
    p = np.asarray(pred_normals, dtype=np.float64)
    g = np.asarray(gt_normals, dtype=np.float64)
    if p.shape != g.shape or p.shape[-1] != 3:
        raise ValueError("normal fields must have equal shapes (..., 3)")
    sel = np.ones(p.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not sel.any():
        raise EvaluationError("empty normal mask")
    cos = np.clip(np.sum(p[sel] * g[sel], axis=-1), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    return float(ang.mean()), float(np.median(ang))


def gt_normals_from_depth(points):
    """Camera-facing normals of an organized ``(H, W, 3)`` cloud.

    Uses central differences along image columns and rows (one-sided at
    the border).  Returns ``(normals, valid)``; missing pixels, pixels with
    missing neighbours and zero-area gradients are invalid and carry zero
    normals.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[2] != 3:
        raise ValueError("expected an organized (H, W, 3) point cloud")
    if min(pts.shape[:2]) < 2:
        raise ValueError("need at least 2x2 pixels")
    du = np.gradient(pts, axis=1)
    dv = np.gradient(pts, axis=0)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=2)
    valid = np.isfinite(norm) & (norm > 1e-12) & np.isfinite(pts).all(axis=2)
    out = np.zeros_like(pts)
    out[valid] = n[valid] / norm[valid, None]
    flip = np.sum(out * np.nan_to_num(pts), axis=2) > 0
    out[flip] *= -1.0
    return out, valid


def seg_accuracy(labels, gt_seg, mask=None) -> float:
    """Oracle segmentation accuracy.

    Each group of pixels sharing a label triple is assigned its majority GT
    class (ties go to the smallest class id); the score is the fraction of
    masked pixels whose assigned class matches.
    """
    labels = np.asarray(labels)
    gt_seg = np.asarray(gt_seg)
    if labels.ndim == gt_seg.ndim:
        labels = labels[..., None]
    if labels.shape[:-1] != gt_seg.shape:
        raise ValueError("label and ground-truth rasters differ in size")
    sel = np.ones(gt_seg.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not sel.any():
        raise EvaluationError("empty segmentation mask")
    _, group = np.unique(labels[sel].reshape(-1, labels.shape[-1]), axis=0, return_inverse=True)
    group = group.reshape(-1)
    pairs, counts = np.unique(np.stack([group, gt_seg[sel].ravel()], axis=1), axis=0,
                              return_counts=True)
    best = np.zeros(group.max() + 1, dtype=np.int64)
    np.maximum.at(best, pairs[:, 0], counts)
    return float(best.sum() / sel.sum())


def oracle_assignment(labels, gt_seg, mask=None) -> np.ndarray:
    """Per-pixel majority GT class of each label group; -1 outside ``mask``."""
    labels = np.asarray(labels)
    gt_seg = np.asarray(gt_seg)
    if labels.ndim == gt_seg.ndim:
        labels = labels[..., None]
    sel = np.ones(gt_seg.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = np.full(gt_seg.shape, -1, dtype=np.int64)
    if not sel.any():
        return out
    _, group = np.unique(labels[sel].reshape(-1, labels.shape[-1]), axis=0, return_inverse=True)
    group = group.reshape(-1)
    pairs, counts = np.unique(np.stack([group, gt_seg[sel].ravel()], axis=1), axis=0,
                              return_counts=True)
    # rows are sorted by (group, class); a stable sort on -count keeps the
    # smallest class first among ties
    order = np.argsort(-counts, kind="stable")
    winner = np.empty(group.max() + 1, dtype=np.int64)
    winner[pairs[order[::-1], 0]] = pairs[order[::-1], 1]
    out[sel] = winner[group]
    return out


@dataclass
class MetricReport:
    absrel: float
    auc: dict = field(default_factory=dict)
    mean_dist: float = float("nan")
    median_dist: float = float("nan")
    normal_mean_deg: float | None = None
    normal_median_deg: float | None = None
    seg_acc: float | None = None
    valid_pixel_count: int = 0

    def as_dict(self) -> dict:
        return {
            "absrel": self.absrel,
            "auc": {str(k): v for k, v in self.auc.items()},
            "mean_dist": self.mean_dist,
            "median_dist": self.median_dist,
            "normal_mean_deg": self.normal_mean_deg,
            "normal_median_deg": self.normal_median_deg,
            "seg_acc": self.seg_acc,
            "valid_pixel_count": self.valid_pixel_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["auc"] = {int(k): float(v) for k, v in d.get("auc", {}).items()}
        return cls(**d)

    def tsv(self) -> str:
        cols = [self.absrel] + [self.auc.get(n) for n in AUC_THRESHOLDS_CM] + [
            self.mean_dist, self.median_dist, self.normal_mean_deg,
            self.normal_median_deg, self.seg_acc, self.valid_pixel_count]
        return "\t".join("" if c is None else (f"{c:.6g}" if isinstance(c, float) else str(c))
                         for c in cols)

    @staticmethod
    def tsv_header() -> str:
        return "\t".join(["absrel"] + [f"auc@{n}" for n in AUC_THRESHOLDS_CM] + [
            "mean_dist", "median_dist", "normal_mean_deg", "normal_median_deg",
            "seg_acc", "valid_pixel_count"])


def evaluate(buffers, gt_depth, gt_normals=None, gt_seg=None, mask=None,
             meters_per_unit: float = 1.0) -> MetricReport:
    """Full report for a :class:`~csgfit.render.RenderBuffers` against GT rasters."""
    gt, valid = _effective_mask(gt_depth, mask)
    pred = _filled(buffers.depth, gt, buffers.far_depth)
    err = np.abs(pred[valid] - gt[valid])
    report = MetricReport(
        absrel=float(np.mean(err / gt[valid])),
        auc={n: float(np.mean(err * meters_per_unit <= n / 100.0 + 1e-12))
             for n in AUC_THRESHOLDS_CM},
        mean_dist=float(err.mean()),
        median_dist=float(np.median(err)),
        valid_pixel_count=int(valid.sum()),
    )
    if gt_normals is not None:
        gn = np.asarray(gt_normals, dtype=np.float64)
        both = valid & buffers.hit_mask & (np.linalg.norm(gn, axis=-1) > 0)
        if both.any():
            report.normal_mean_deg, report.normal_median_deg = normal_errors(
                buffers.normals, gn, both)
    if gt_seg is not None:
        report.seg_acc = seg_accuracy(buffers.labels, gt_seg, valid)
    return report
