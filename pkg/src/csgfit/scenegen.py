"""Synthetic scenes with exact ground truth.

Scenes are flat CSG trees of hard oriented boxes (union of positives minus
union of negatives), posed in front of a pinhole camera.  Ground-truth
renders step along each ray at a fixed fine spacing until the exact
occupancy flips, then bisect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConvexPrimitive, CsgModel, SceneTransform
from .render import RenderBuffers
from .sampling import Camera, DepthImage

SCENE_NAMES = ("box", "box_with_hole", "offset_cube_difference", "l_shape", "two_boxes", "shelf")
FINE_STEP = 1e-4
_BISECT_ITERS = 40


@dataclass(frozen=True)
class AnalyticBox:
    """Hard oriented box; ``axes`` rows are its local x/y/z directions."""

    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray
    negative: bool = False

    @property
    def normals(self) -> np.ndarray:
        return np.concatenate([self.axes, -self.axes])

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([self.half_extents, self.half_extents])

    def affine(self, X) -> np.ndarray:
        return (np.asarray(X) - self.center) @ self.normals.T - self.offsets

    def inside(self, X) -> np.ndarray:
        return self.affine(X).max(axis=-1) < 0

    def sdf(self, X) -> np.ndarray:
        """Exact Euclidean signed distance."""
        q = np.abs((np.asarray(X) - self.center) @ self.axes.T) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def vertices(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return self.center + (signs * self.half_extents) @ self.axes

    def posed(self, R, t) -> "AnalyticBox":
        return AnalyticBox(R @ self.center + t, self.axes @ R.T, self.half_extents, self.negative)


@dataclass(frozen=True)
class AnalyticScene:
    name: str
    boxes: tuple  # camera-frame geometry
    focal_factor: float = 1.3  # preset focal length as a multiple of max(W, H)

    @property
    def positives(self):
        return [b for b in self.boxes if not b.negative]

    @property
    def negatives(self):
        return [b for b in self.boxes if b.negative]

    def camera(self, resolution=(64, 64)) -> Camera:
        w, h = resolution
        f = self.focal_factor * max(w, h)
        return Camera(f, f, w / 2.0, h / 2.0, int(w), int(h))

    def bounding_sphere(self):
        verts = np.concatenate([b.vertices() for b in self.positives])
        c = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
        return c, float(np.linalg.norm(verts - c, axis=1).max())

    def surface_distance(self, X) -> np.ndarray:
        """Lower bound on distance to any box boundary (min over boxes)."""
        return np.min([np.abs(b.sdf(X)) for b in self.boxes], axis=0)

    def normalizing_transform(self) -> SceneTransform:
        """Map the positives' bounding box into the unit cube."""
        from .sampling import normalize_to_unit_cube
        _, tf = normalize_to_unit_cube(np.concatenate([b.vertices() for b in self.positives]))
        return tf

    def to_model(self, delta: float = 1e-3, sigma: float = 200.0,
                 transform: SceneTransform | None = None) -> CsgModel:
        """Smoothed model of the scene, expressed in a normalized frame.

        ``delta`` is in normalized units; ``transform`` defaults to
        :meth:`normalizing_transform`.
        """
        tf = self.normalizing_transform() if transform is None else transform

        def prim(b):
            return ConvexPrimitive(tf.apply(b.center), b.axes, tf.scale * b.offsets, delta,
                                   symmetric=True)
        return CsgModel([prim(b) for b in self.positives], [prim(b) for b in self.negatives],
                        sigma, tf)


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera rotation and translation (camera x right, y down, z forward)."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    R = np.stack([right, -cam_up, fwd])
    return R, -R @ eye


def _box(center, half, negative=False):
    return AnalyticBox(np.asarray(center, float), np.eye(3), np.asarray(half, float), negative)


def _world_geometry(name):
    if name == "box":
        return [_box((0, 0, 0), (0.5, 0.5, 0.5))], (1.0, 0.8, 1.3), 2.3
    if name == "box_with_hole":
        return [_box((0, 0, 0), (0.5, 0.5, 0.5)),
                _box((0, 0, 0), (0.2, 0.2, 0.75), negative=True)], (0.55, 0.45, 1.0), 2.25
    if name == "offset_cube_difference":
        return [_box((0, 0, 0), (0.5, 0.5, 0.5)),
                _box((0.5, 0.5, 0.5), (0.5, 0.5, 0.5), negative=True)], (1.0, 0.9, 1.1), 2.35
    if name == "l_shape":
        return [_box((0, -0.3, 0), (0.5, 0.2, 0.3)),
                _box((-0.3, 0.175, 0), (0.2, 0.325, 0.3))], (0.6, 0.5, 1.0), 2.0
    if name == "two_boxes":
        return [_box((-0.35, 0, 0), (0.25, 0.4, 0.3)),
                _box((0.4, -0.15, 0.1), (0.2, 0.25, 0.2))], (0.4, 0.6, 1.0), 2.05
    if name == "shelf":
        return [_box((0, 0, 0), (0.5, 0.5, 0.25)),
                _box((0, 0.22, 0.1), (0.42, 0.16, 0.25), negative=True),
                _box((0, -0.22, 0.1), (0.42, 0.16, 0.25), negative=True)], (0.45, 0.35, 1.0), 1.85
    raise ValueError(f"unknown scene {name!r}; valid names: {', '.join(SCENE_NAMES)}")


def builtin_scene(name: str, view: str = "three_quarter") -> AnalyticScene:
    """One of :data:`SCENE_NAMES`, seen from a fixed camera preset.

    ``view`` is ``"three_quarter"`` (the default preset) or ``"frontal"``
    (camera on the +z axis looking at the origin).
    """
    boxes, direction, distance = _world_geometry(name)
    if view == "frontal":
        direction = (0.0, 0.0, 1.0)
    elif view != "three_quarter":
        raise ValueError(f"unknown view {view!r}")
    d = np.asarray(direction, dtype=np.float64)
    eye = distance * d / np.linalg.norm(d)
    target = np.zeros(3)
    verts = np.concatenate([b.vertices() for b in boxes if not b.negative])
    for _ in range(3):
        # re-aim so the silhouette's image bounding box is centered
        R, t = look_at(eye, target)
        p = verts @ R.T + t
        u, v = p[:, 0] / p[:, 2], p[:, 1] / p[:, 2]
        du, dv = 0.5 * (u.min() + u.max()), 0.5 * (v.min() + v.max())
        depth = np.linalg.norm(target - eye)
        target = target + depth * (du * R[0] + dv * R[1])
    R, t = look_at(eye, target)
    return AnalyticScene(name, tuple(b.posed(R, t) for b in boxes))


def analytic_occupancy(s: AnalyticScene, x) -> np.ndarray:
    """Exact hard CSG membership (1 inside, 0 outside)."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    inside = np.zeros(len(X), dtype=bool)
    for b in s.positives:
        inside |= b.inside(X)
    for b in s.negatives:
        inside &= ~b.inside(X)
    out = inside.astype(np.int64)
    return int(out[0]) if single else out


def _sphere_interval(c, r, dirs):
    b = dirs @ c
    disc = b * b - (c @ c - r * r)
    ok = disc > 0
    root = np.sqrt(np.maximum(disc, 0.0))
    return np.maximum(b - root, 0.0), b + root, ok


def first_hits(s: AnalyticScene, dirs, step: float = FINE_STEP, block: int = 256,
               ray_chunk: int = 128):
    """Ray distance to the first occupied point along each camera-origin ray.

    Returns ``(t, hit)``; ``t`` is ``inf`` for misses.
    """
    c, r = s.bounding_sphere()
    t0, t1, ok = _sphere_interval(c, r * 1.001, dirs)
    n = len(dirs)
    lo = np.full(n, np.nan)
    hi = np.full(n, np.nan)
    offsets = np.arange(block) * step
    for start in range(0, n, ray_chunk):
        rays = np.arange(start, min(start + ray_chunk, n))
        rays = rays[ok[rays]]
        base = t0[rays].copy()
        active = np.ones(len(rays), dtype=bool)
        while active.any():
            ai = np.flatnonzero(active)
            ts = base[ai, None] + offsets[None, :]
            P = ts[..., None] * dirs[rays[ai], None, :]
            occ = analytic_occupancy(s, P.reshape(-1, 3)).reshape(len(ai), block).astype(bool)
            occ &= ts <= t1[rays[ai], None]
            found = occ.any(axis=1)
            first = occ.argmax(axis=1)
            got = ai[found]
            hi[rays[got]] = ts[found, first[found]]
            lo[rays[got]] = np.maximum(hi[rays[got]] - step, t0[rays[got]])
            base[ai] += block * step
            active[got] = False
            active[ai[base[ai] > t1[rays[ai]]]] = False
    hit = np.isfinite(hi)
    idx = np.flatnonzero(hit)
    a, b = lo[idx], hi[idx]
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (a + b)
        inside = analytic_occupancy(s, mid[:, None] * dirs[idx]).astype(bool)
        b = np.where(inside, mid, b)
        a = np.where(inside, a, mid)
    t_hit = np.full(n, np.inf)
    t_hit[idx] = 0.5 * (a + b)
    return t_hit, hit


def surface_attributes(s: AnalyticScene, X):
    """Owning box, face index and outward solid normal at surface points."""
    boxes = list(s.boxes)
    affine = np.stack([b.affine(X) for b in boxes])  # (B, N, 6)
    m = affine.max(axis=2)
    owner = np.abs(m).argmin(axis=0)
    face = affine[owner, np.arange(len(X))].argmax(axis=1)
    normals = np.empty((len(X), 3))
    for bi, b in enumerate(boxes):
        sel = owner == bi
        n = b.normals[face[sel]]
        normals[sel] = -n if b.negative else n
    return owner, face, normals


def analytic_render(s: AnalyticScene, cam: Camera) -> RenderBuffers:
    """Ground-truth depth, normals and (face, box, -1) labels."""
    dirs = cam.ray_directions().reshape(-1, 3)
    t, hit = first_hits(s, dirs)
    n = len(dirs)
    depth = np.full(n, np.inf)
    normals = np.zeros((n, 3))
    labels = np.full((n, 3), -1, dtype=np.int64)
    idx = np.flatnonzero(hit)
    if idx.size:
        X = t[idx, None] * dirs[idx]
        owner, face, nrm = surface_attributes(s, X)
        depth[idx] = t[idx] * dirs[idx, 2]
        normals[idx] = nrm
        labels[idx, 0] = face
        labels[idx, 1] = owner
    H, W = cam.height, cam.width
    _, r = s.bounding_sphere()
    far = float(np.linalg.norm(s.bounding_sphere()[0]) + 2 * r)
    return RenderBuffers(depth.reshape(H, W), normals.reshape(H, W, 3),
                         labels.reshape(H, W, 3), hit.reshape(H, W), far)


def segmentation_ids(labels: np.ndarray) -> np.ndarray:
    """Integer segment id ``box * 6 + face`` per pixel, -1 on background."""
    ids = labels[..., 1] * 6 + labels[..., 0]
    return np.where(labels[..., 1] >= 0, ids, -1)


def scene_to_depth_input(s: AnalyticScene, cam: Camera | None = None, resolution=(64, 64)):
    """Ground-truth depth as sensor input: ``(DepthImage, Camera)``; misses invalid."""
    cam = s.camera(resolution) if cam is None else cam
    gt = analytic_render(s, cam)
    values = np.where(gt.hit_mask, gt.depth, 0.0)
    return DepthImage(values, gt.hit_mask), cam
