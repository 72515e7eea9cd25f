"""Depth images to labeled 3D sample reservoirs.

Pixels are lifted along pinhole rays (camera at the origin, +z forward,
+y down), the visible cloud is normalized into the unit cube, and three
kinds of samples are generated:

* ``surface_in``   -- pushed ``epsilon`` behind the observed surface, label 1
* ``surface_out``  -- pulled ``epsilon`` in front of it, label 0
* ``freespace``    -- anywhere between the camera and ``epsilon`` before the
  surface, label 0

Volume behind the inside band is unobserved and never sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import SceneTransform

SURFACE_IN, SURFACE_OUT, FREESPACE = 0, 1, 2
KIND_NAMES = ("surface_in", "surface_out", "freespace")
DEFAULT_EPSILON = 0.02


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int, height: int) -> "Camera":
        """Intrinsics used when none are supplied."""
        f = 0.6 * max(width, height)
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    def ray_grid(self) -> np.ndarray:
        """Un-normalized ray ``((u-cx)/fx, (v-cy)/fy, 1)`` per pixel, ``(H, W, 3)``."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                         np.ones_like(u)], axis=-1)

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions per pixel, ``(H, W, 3)``."""
        r = self.ray_grid()
        return r / np.linalg.norm(r, axis=-1, keepdims=True)

    def project(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx,
                         self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1)


@dataclass
class DepthImage:
    """Row-major depth raster; pixels that are masked out or not positive are invalid."""

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {self.values.shape}")
        valid = np.isfinite(self.values) & (self.values > 0)
        if self.mask is not None:
            valid &= np.asarray(self.mask, dtype=bool)
        self.mask = valid

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class SampleSet:
    points: np.ndarray
    labels: np.ndarray
    kind: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        self.kind = np.asarray(self.kind, dtype=np.int8).reshape(-1)
        if not (len(self.points) == len(self.labels) == len(self.kind)):
            raise ValueError("labels and kind must match points in length")

    def __len__(self):
        return len(self.labels)

    def of_kind(self, kind: int) -> "SampleSet":
        sel = self.kind == kind
        return SampleSet(self.points[sel], self.labels[sel], self.kind[sel])

    def take(self, idx) -> "SampleSet":
        return SampleSet(self.points[idx], self.labels[idx], self.kind[idx])

    @classmethod
    def concat(cls, sets) -> "SampleSet":
        sets = list(sets)
        if not sets:
            return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0))
        return cls(np.concatenate([s.points for s in sets]),
                   np.concatenate([s.labels for s in sets]),
                   np.concatenate([s.kind for s in sets]))


def _check_shapes(d: DepthImage, cam: Camera):
    if (d.height, d.width) != (cam.height, cam.width):
        raise ValueError(f"depth {d.width}x{d.height} does not match camera "
                         f"{cam.width}x{cam.height}")
    if not d.mask.any():
        raise ValueError("depth image has no valid pixels")


def edge_pixels(d: DepthImage, rel_jump: float = 0.05) -> np.ndarray:
    """Valid pixels with an invalid 8-neighbour or a relative depth jump.

    These silhouette pixels are where the inside band can leave the solid.
    """
    z = np.where(d.mask, d.values, np.inf)
    pad = np.pad(z, 1, constant_values=np.inf)
    h, w = z.shape
    edge = np.zeros((h, w), dtype=bool)
    with np.errstate(invalid="ignore"):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                nb = pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                edge |= ~np.isfinite(nb) | (np.abs(nb - z) > rel_jump * z)
    return edge & d.mask


def unproject_organized(d: DepthImage, cam: Camera) -> np.ndarray:
    """``(H, W, 3)`` camera-frame points, NaN at invalid pixels."""
    if (d.height, d.width) != (cam.height, cam.width):
        raise ValueError("depth and camera sizes differ")
    z = np.where(d.mask, d.values, np.nan)
    return cam.ray_grid() * z[..., None]


def unproject(d: DepthImage, cam: Camera) -> np.ndarray:
    """Valid pixels as an ``(M, 3)`` cloud in raw units, row-major order."""
    _check_shapes(d, cam)
    return cam.ray_grid()[d.mask] * d.values[d.mask][:, None]


def normalize_to_unit_cube(points):
    """Isotropically map the bounding box into ``[-0.5, 0.5]^3``.

    The longest axis spans exactly 1.  Returns the mapped points and the
    transform that produced them.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise ValueError("need at least two points to normalize")
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise ValueError("point cloud has a zero-extent bounding box")
    scale = 1.0 / extent
    transform = SceneTransform(scale, -scale * 0.5 * (lo + hi))
    return transform.apply(points), transform


def surface_samples(d: DepthImage, cam: Camera, transform: SceneTransform,
                    epsilon: float = DEFAULT_EPSILON) -> SampleSet:
    """One inside and one outside sample per valid pixel, ``2*epsilon`` apart."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    surf = transform.apply(unproject(d, cam))
    dirs = cam.ray_directions()[d.mask]
    m = len(surf)
    inside = surf + epsilon * dirs
    outside = surf - epsilon * dirs
    return SampleSet(
        np.concatenate([inside, outside]),
        np.concatenate([np.ones(m), np.zeros(m)]),
        np.concatenate([np.full(m, SURFACE_IN), np.full(m, SURFACE_OUT)]),
    )


def freespace_samples(d: DepthImage, cam: Camera, transform: SceneTransform,
                      count: int, rng, epsilon: float = DEFAULT_EPSILON) -> SampleSet:
    """``count`` free-space points, uniform by volume inside the observed frustum.

    Each point lies on a valid pixel's center ray, at least ``epsilon``
    (normalized units) in front of that pixel's surface.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    _check_shapes(d, cam)
    raw = cam.ray_grid()[d.mask]
    dirs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    reach = transform.scale * np.linalg.norm(raw * d.values[d.mask][:, None], axis=1) - epsilon
    reach = np.maximum(reach, 0.0)
    # pixel solid angle ~ cos^3, frustum slice volume ~ reach^3
    weight = reach ** 3 * dirs[:, 2] ** 3
    if not weight.sum() > 0:
        raise ValueError("no free space in front of the observed surface")
    pix = rng.choice(len(reach), size=count, p=weight / weight.sum())
    t = reach[pix] * np.cbrt(rng.random(count))
    origin = transform.apply(np.zeros(3))
    pts = origin + t[:, None] * dirs[pix]
    return SampleSet(pts, np.zeros(count), np.full(count, FREESPACE))


def subsample(sets, fraction: float = 0.10, rng=None) -> SampleSet:
    """Uniform draw of ``ceil(fraction * N)`` samples without replacement."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if isinstance(sets, SampleSet):
        sets = [sets]
    pool = SampleSet.concat(sets)
    n = math.ceil(fraction * len(pool))
    rng = np.random.default_rng() if rng is None else rng
    return pool.take(rng.choice(len(pool), size=n, replace=False))


@dataclass
class SceneSamples:
    """Everything a fit needs from one depth image."""

    reservoir: SampleSet
    transform: SceneTransform
    cloud: np.ndarray  # normalized visible surface points

    @property
    def surface_in(self) -> np.ndarray:
        return self.reservoir.points[self.reservoir.kind == SURFACE_IN]


def build_scene_samples(d: DepthImage, cam: Camera, freespace_count: int = 50_000,
                        epsilon: float = DEFAULT_EPSILON, seed: int = 0) -> SceneSamples:
    cloud, transform = normalize_to_unit_cube(unproject(d, cam))
    rng = np.random.default_rng(seed)
    surface = surface_samples(d, cam, transform, epsilon)
    free = freespace_samples(d, cam, transform, freespace_count, rng, epsilon)
    return SceneSamples(SampleSet.concat([surface, free]), transform, cloud)
