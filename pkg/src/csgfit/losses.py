"""Training objective: occupancy sample loss plus four regularizers.

These are plain forward definitions.  The optimizer differentiates the same
objective in :mod:`csgfit.optim`; tests compare the two by finite differences.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import CsgModel, PrimitiveGroup, group_phi, pack_model, sigmoid, union_from_indicators
from .sampling import SURFACE_IN, SampleSet

DEFAULT_NEIGHBORS = 50
TERMS = ("sample", "overlap", "unique", "guidance", "localization")


@dataclass(frozen=True)
class LossWeights:
    w_sample: float = 1.0
    w_overlap: float = 0.1
    w_unique: float = 0.1
    w_guidance: float = 0.01
    w_localization: float = 0.01

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if not self.w_sample > 0:
            raise ValueError("w_sample must be > 0")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{k: v * factor for k, v in asdict(self).items()})

    def vector(self) -> np.ndarray:
        return np.array([self.w_sample, self.w_overlap, self.w_unique,
                         self.w_guidance, self.w_localization])


@dataclass(frozen=True)
class LossBreakdown:
    sample: float
    overlap: float
    unique: float
    guidance: float
    localization: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


class SurfaceAnchors:
    """Spatial index over ``surface_in`` points, built once per fit."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.tree = cKDTree(self.points) if len(self.points) else None

    @classmethod
    def from_samples(cls, s: SampleSet) -> "SurfaceAnchors":
        return cls(s.points[s.kind == SURFACE_IN])

    def __len__(self):
        return len(self.points)

    def neighbors(self, centers, m: int = DEFAULT_NEIGHBORS) -> np.ndarray:
        """Indices ``(K, min(m, n))`` of each center's nearest anchors."""
        k = min(m, len(self.points))
        if k == 0 or len(centers) == 0:
            return np.zeros((len(centers), 0), dtype=np.int64)
        _, idx = self.tree.query(centers, k=k)
        return np.asarray(idx).reshape(len(centers), k)

    def nearest(self, centers) -> np.ndarray:
        if len(self.points) == 0 or len(centers) == 0:
            return np.zeros(len(centers), dtype=np.int64)
        _, idx = self.tree.query(centers, k=1)
        return np.asarray(idx).reshape(len(centers))


def _nonempty(s: SampleSet):
    if len(s) == 0:
        raise ValueError("sample batch is empty")


def sample_loss(m: CsgModel, s: SampleSet, temperature=None) -> float:
    """Mean squared error between the CSG indicator and sample labels."""
    _nonempty(s)
    pos, neg = pack_model(m)
    return _sample_loss(pos, neg, m.sharpness_sigma, s, temperature)


def _sample_loss(pos, neg, sigma, s, temperature=None):
    o_pos = union_from_indicators(sigmoid(-sigma * group_phi(pos, s.points)), temperature)
    o_neg = union_from_indicators(sigmoid(-sigma * group_phi(neg, s.points)), temperature)
    occ = np.maximum(o_pos - o_neg, 0.0)
    return float(np.mean((occ - s.labels) ** 2))


def overlap_loss(m: CsgModel, s: SampleSet) -> float:
    """Penalty on summed positive indicators exceeding one."""
    _nonempty(s)
    pos, _ = pack_model(m)
    return _overlap_loss(pos, m.sharpness_sigma, s)


def _overlap_loss(pos, sigma, s):
    total = sigmoid(-sigma * group_phi(pos, s.points)).sum(axis=0)
    return float(np.mean(np.maximum(total - 1.0, 0.0) ** 2))


def _unique_parts(group: PrimitiveGroup):
    offset_terms = np.maximum(-group.offsets, 0.0) ** 2
    normal_terms = (np.linalg.norm(group.normals, axis=2) - 1.0) ** 2
    return offset_terms, normal_terms


def unique_parametrization_loss(m: CsgModel) -> float:
    """Mean of ``relu(-d)^2`` over faces plus mean of ``(|n| - 1)^2`` over normals."""
    pos, neg = pack_model(m)
    return _unique_loss(pos, neg)


def _unique_loss(pos, neg):
    off_p, nrm_p = _unique_parts(pos)
    off_n, nrm_n = _unique_parts(neg)
    offsets = np.concatenate([off_p.ravel(), off_n.ravel()])
    normals = np.concatenate([nrm_p.ravel(), nrm_n.ravel()])
    return float(offsets.mean() + normals.mean())


def _guidance_parts(group, anchors, neighbors):
    if len(group) == 0 or len(anchors) == 0:
        return np.zeros(len(group))
    idx = anchors.neighbors(group.centers, neighbors)
    phi = group_phi(group, anchors.points[idx])
    return (phi ** 2).mean(axis=1)


def _localization_parts(group, anchors):
    if len(group) == 0 or len(anchors) == 0:
        return np.zeros(len(group))
    near = anchors.points[anchors.nearest(group.centers)]
    return ((group.centers - near) ** 2).sum(axis=1)


def guidance_loss(m: CsgModel, s: SampleSet, neighbors: int = DEFAULT_NEIGHBORS,
                  anchors: SurfaceAnchors | None = None) -> float:
    """Mean over primitives of mean ``phi^2`` on the nearest surface samples."""
    anchors = SurfaceAnchors.from_samples(s) if anchors is None else anchors
    pos, neg = pack_model(m)
    parts = np.concatenate([_guidance_parts(pos, anchors, neighbors),
                            _guidance_parts(neg, anchors, neighbors)])
    return float(parts.mean())


def localization_loss(m: CsgModel, s: SampleSet,
                      anchors: SurfaceAnchors | None = None) -> float:
    """Mean squared distance from each center to its nearest surface sample."""
    _nonempty(s)
    anchors = SurfaceAnchors.from_samples(s) if anchors is None else anchors
    pos, neg = pack_model(m)
    parts = np.concatenate([_localization_parts(pos, anchors),
                            _localization_parts(neg, anchors)])
    return float(parts.mean())


def auxiliary_contributions(m: CsgModel, s: SampleSet, neighbors: int = DEFAULT_NEIGHBORS,
                            anchors: SurfaceAnchors | None = None) -> dict:
    """Per-primitive regularizer contributions, before averaging.

    Keys map to ``(positive_array, negative_array)`` pairs.
    """
    anchors = SurfaceAnchors.from_samples(s) if anchors is None else anchors
    pos, neg = pack_model(m)
    out = {}
    for name, fn in (
        ("unique_offsets", lambda g: _unique_parts(g)[0].sum(axis=1)),
        ("unique_normals", lambda g: _unique_parts(g)[1].sum(axis=1)),
        ("guidance", lambda g: _guidance_parts(g, anchors, neighbors)),
        ("localization", lambda g: _localization_parts(g, anchors)),
    ):
        out[name] = (fn(pos), fn(neg))
    return out


def evaluate_terms(pos, neg, sigma, s: SampleSet, anchors: SurfaceAnchors,
                   neighbors: int = DEFAULT_NEIGHBORS, temperature=None) -> np.ndarray:
    """The five raw terms for packed groups, in ``TERMS`` order."""
    _nonempty(s)
    guidance = np.concatenate([_guidance_parts(pos, anchors, neighbors),
                               _guidance_parts(neg, anchors, neighbors)]).mean()
    localization = np.concatenate([_localization_parts(pos, anchors),
                                   _localization_parts(neg, anchors)]).mean()
    return np.array([
        _sample_loss(pos, neg, sigma, s, temperature),
        _overlap_loss(pos, sigma, s),
        _unique_loss(pos, neg),
        guidance,
        localization,
    ])


def total_loss(m: CsgModel, s: SampleSet, w: LossWeights | None = None,
               anchors: SurfaceAnchors | None = None, neighbors: int = DEFAULT_NEIGHBORS,
               temperature=None) -> LossBreakdown:
    """Weighted sum of all terms with the per-term breakdown."""
    w = LossWeights() if w is None else w
    anchors = SurfaceAnchors.from_samples(s) if anchors is None else anchors
    pos, neg = pack_model(m)
    terms = evaluate_terms(pos, neg, m.sharpness_sigma, s, anchors, neighbors, temperature)
    return LossBreakdown(*map(float, terms), total=float(terms @ w.vector()))
