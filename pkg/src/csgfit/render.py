"""Sphere tracing of CSG models into per-pixel render buffers.

Rays are traced in the model's normalized frame.  Each step advances by
``max(step_factor * sdf, min_step)``; once the field changes sign the
bracketing interval is bisected.  Depth is reported as camera z in raw
scene units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .core import CsgModel, face_labels_packed, pack_model, sdf_packed
from .sampling import Camera


@dataclass(frozen=True)
class MarchConfig:
    min_step: float = 0.001
    step_factor: float = 0.8
    max_steps: int = 512
    halving_iters: int = 16
    t_max: Optional[float] = None  # normalized units; None -> |origin| + 2

    def __post_init__(self):
        if not self.min_step > 0:
            raise ValueError("min_step must be > 0")
        if not 0 < self.step_factor < 1:
            raise ValueError("step_factor must be in (0, 1)")


BEAUTY = MarchConfig(min_step=0.0001)


class MarchHit(NamedTuple):
    t: float
    point: np.ndarray
    bracket: tuple


@dataclass
class RenderBuffers:
    depth: np.ndarray  # (H, W) camera z, raw units, +inf on misses
    normals: np.ndarray  # (H, W, 3), zero on misses
    labels: np.ndarray  # (H, W, 3) int: face, positive, negative (-1 = none)
    hit_mask: np.ndarray  # (H, W) bool
    far_depth: float = np.inf  # raw-unit depth used to score misses

    @property
    def shape(self):
        return self.hit_mask.shape

    def distinct_labels(self) -> int:
        if not self.hit_mask.any():
            return 0
        return len(np.unique(self.labels[self.hit_mask], axis=0))


def march_rays(pos, neg, origins, dirs, cfg: MarchConfig, t_max: float, path=None):
    """Batched sphere tracing.

    Returns ``(t, hit, lo, hi)``: refined hit distance, hit flags and the
    final bisection bracket per ray.  If ``path`` is a list, every marching
    evaluation is appended to it as ``(ray_indices, t_values)``.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    n = dirs.shape[0]
    t = np.zeros(n)
    t_prev = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(cfg.max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        if path is not None:
            path.append((idx, t[idx].copy()))
        d = sdf_packed(pos, neg, origins[idx] + t[idx, None] * dirs[idx])
        inside = d <= 0
        hit[idx[inside]] = True
        active[idx[inside]] = False
        out = idx[~inside]
        t_prev[out] = t[out]
        t[out] = t[out] + np.maximum(cfg.step_factor * d[~inside], cfg.min_step)
        active[out[t[out] > t_max]] = False

    lo, hi = t_prev.copy(), t.copy()
    idx = np.flatnonzero(hit & (hi > lo))
    for _ in range(cfg.halving_iters):
        if idx.size == 0:
            break
        mid = 0.5 * (lo[idx] + hi[idx])
        d = sdf_packed(pos, neg, origins[idx] + mid[:, None] * dirs[idx])
        inside = d <= 0
        hi[idx[inside]] = mid[inside]
        lo[idx[~inside]] = mid[~inside]
    t_hit = np.where(hit, 0.5 * (lo + hi), np.inf)
    return t_hit, hit, lo, hi


def _default_t_max(origin):
    return float(np.linalg.norm(origin)) + 2.0


def march_ray(m: CsgModel, origin, direction, cfg: MarchConfig = MarchConfig()):
    """Trace one normalized-frame ray; returns a :class:`MarchHit` or None."""
    direction = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    pos, neg = pack_model(m)
    t_max = cfg.t_max if cfg.t_max is not None else _default_t_max(origin)
    t, hit, lo, hi = march_rays(pos, neg, origin, direction, cfg, t_max)
    if not hit[0]:
        return None
    return MarchHit(float(t[0]), origin + t[0] * direction[0], (float(lo[0]), float(hi[0])))


def sdf_normals(pos, neg, X, h):
    """Normalized central-difference gradient of the CSG field."""
    grad = np.empty_like(X)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        grad[:, axis] = sdf_packed(pos, neg, X + e) - sdf_packed(pos, neg, X - e)
    norm = np.linalg.norm(grad, axis=1, keepdims=True)
    return grad / np.where(norm > 0, norm, 1.0)


def render(m: CsgModel, cam: Camera, cfg: MarchConfig = MarchConfig(), chunk: int = 8192) -> RenderBuffers:
    """Raymarch every pixel of ``cam`` against ``m``."""
    pos, neg = pack_model(m)
    tf = m.scene_transform
    origin = tf.apply(np.zeros(3))
    t_max = cfg.t_max if cfg.t_max is not None else _default_t_max(origin)
    dirs = cam.ray_directions().reshape(-1, 3)
    n = dirs.shape[0]
    t = np.full(n, np.inf)
    hit = np.zeros(n, dtype=bool)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        t[sl], hit[sl], _, _ = march_rays(pos, neg, origin, dirs[sl], cfg, t_max)

    depth = np.full(n, np.inf)
    normals = np.zeros((n, 3))
    labels = np.full((n, 3), -1, dtype=np.int64)
    idx = np.flatnonzero(hit)
    if idx.size:
        X = origin + t[idx, None] * dirs[idx]
        depth[idx] = t[idx] / tf.scale * dirs[idx, 2]
        normals[idx] = sdf_normals(pos, neg, X, 2.0 * cfg.min_step)
        labels[idx] = face_labels_packed(pos, neg, X)
    H, W = cam.height, cam.width
    return RenderBuffers(depth.reshape(H, W), normals.reshape(H, W, 3),
                         labels.reshape(H, W, 3), hit.reshape(H, W), t_max / tf.scale)
