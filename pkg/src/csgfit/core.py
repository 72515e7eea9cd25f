"""Smoothed convex polytopes and flat union-minus-union CSG models.

A primitive is the blended intersection of ``f`` half-spaces.  Its field

    phi(x) = delta * log(sum_i exp((n_i . (x - c) - d_i) / delta))

is a smooth upper bound on the hard polytope's max-of-planes value: negative
inside, positive outside.  Occupancy is ``sigmoid(-sigma * phi)`` and a model
combines ``relu(O+(x) - O-(x))`` over positive and negative primitive sets.

Everything here is a pure function of immutable inputs.  Point arguments may
be a single 3-vector or an ``(N, 3)`` array; results follow the same leading
shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import EvaluationError

DEFAULT_SIGMA = 75.0
DELTA_BOUNDS = (1e-4, 0.2)
SURFACE_TOLERANCE = 1e-3
_TIE_TOLERANCE = 1e-9


def _readonly(a):
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def _points(x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != 3:
        raise ValueError(f"points must have trailing dimension 3, got {x.shape}")
    if not np.isfinite(x).all():
        raise EvaluationError("non-finite query point")
    return x, single


@dataclass(frozen=True)
class ConvexPrimitive:
    """One smoothed polytope.

    In symmetric mode ``normals`` holds ``f/2`` vectors; the faces are
    ``[n_1..n_g, -n_1..-n_g]`` with independent offsets, so a parallelepiped
    has 3 + 6 + 6 + 1 = 16 parameters.  In free mode there is one stored
    normal per face.
    """

    center: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    blend_delta: float
    symmetric: bool = True

    def __post_init__(self):
        center = _readonly(self.center).reshape(3)
        normals = _readonly(self.normals)
        offsets = _readonly(self.offsets).reshape(-1)
        if normals.ndim != 2 or normals.shape[1] != 3:
            raise ValueError(f"normals must be (g, 3), got {normals.shape}")
        per = 2 if self.symmetric else 1
        if normals.shape[0] * per != offsets.shape[0]:
            raise ValueError(
                f"{normals.shape[0]} stored normals x {per} != {offsets.shape[0]} offsets"
            )
        if offsets.shape[0] < 4:
            raise ValueError(f"a primitive needs at least 4 faces, got {offsets.shape[0]}")
        if not self.blend_delta > 0:
            raise ValueError(f"blend_delta must be > 0, got {self.blend_delta}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "blend_delta", float(self.blend_delta))
        object.__setattr__(self, "symmetric", bool(self.symmetric))

    @property
    def face_count(self) -> int:
        return self.offsets.shape[0]

    @property
    def parameter_count(self) -> int:
        """Degrees of freedom; each unit normal contributes 2."""
        return 3 + 2 * self.normals.shape[0] + self.offsets.size + 1

    @property
    def face_normals(self) -> np.ndarray:
        if self.symmetric:
            return np.concatenate([self.normals, -self.normals], axis=0)
        return self.normals

    def affine(self, x) -> np.ndarray:
        """Per-face values ``n_i . (x - c) - d_i``, shape ``(..., f)``."""
        x = np.asarray(x, dtype=np.float64)
        return (x - self.center) @ self.face_normals.T - self.offsets

    def transformed(self, rotation, translation) -> "ConvexPrimitive":
        """Apply the rigid map ``x -> R x + t`` to the primitive."""
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        return ConvexPrimitive(
            center=R @ self.center + t,
            normals=self.normals @ R.T,
            offsets=self.offsets,
            blend_delta=self.blend_delta,
            symmetric=self.symmetric,
        )

    @classmethod
    def box(cls, center, half_extents, delta=0.02, rotation=None) -> "ConvexPrimitive":
        """Symmetric parallelepiped with axes given by the rows of ``rotation``."""
        axes = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        h = np.asarray(half_extents, dtype=np.float64).reshape(3)
        return cls(center, axes, np.concatenate([h, h]), delta, symmetric=True)


@dataclass(frozen=True)
class SceneTransform:
    """Isotropic similarity ``p_norm = scale * p_raw + translate``."""

    scale: float = 1.0
    translate: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scene_transform scale must be > 0, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "translate", _readonly(self.translate).reshape(3))

    def apply(self, p):
        return self.scale * np.asarray(p, dtype=np.float64) + self.translate

    def inverse(self, q):
        return (np.asarray(q, dtype=np.float64) - self.translate) / self.scale


@dataclass(frozen=True)
class CsgModel:
    """Union of ``positives`` minus union of ``negatives``."""

    positives: tuple
    negatives: tuple = ()
    sharpness_sigma: float = DEFAULT_SIGMA
    scene_transform: SceneTransform = field(default_factory=SceneTransform)

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(self.positives))
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if len(self.positives) < 1:
            raise ValueError("a model needs at least one positive primitive")
        if not self.sharpness_sigma > 0:
            raise ValueError(f"sharpness_sigma must be > 0, got {self.sharpness_sigma}")
        object.__setattr__(self, "sharpness_sigma", float(self.sharpness_sigma))

    @property
    def k_pos(self) -> int:
        return len(self.positives)

    @property
    def k_neg(self) -> int:
        return len(self.negatives)

    @property
    def k_total(self) -> int:
        return self.k_pos + self.k_neg

    @property
    def face_count(self) -> int:
        return max(p.face_count for p in self.positives + self.negatives)

    def without_negatives(self) -> "CsgModel":
        return CsgModel(self.positives, (), self.sharpness_sigma, self.scene_transform)


class FaceTriple(NamedTuple):
    """Boundary patch id; ``negative_index`` is None for positive faces."""

    face_index: int
    positive_index: int
    negative_index: Optional[int]


# ---------------------------------------------------------------------------
# Packed (stacked) primitive groups for batched evaluation.


@dataclass
class PrimitiveGroup:
    """``K`` primitives with a shared face layout stored as stacked arrays."""

    centers: np.ndarray  # (K, 3)
    normals: np.ndarray  # (K, g, 3)
    offsets: np.ndarray  # (K, f)
    log_delta: np.ndarray  # (K,)
    symmetric: bool = True

    def __len__(self):
        return self.centers.shape[0]

    @property
    def delta(self) -> np.ndarray:
        return np.exp(self.log_delta)

    @property
    def face_count(self) -> int:
        return self.offsets.shape[1]

    def face_normals(self) -> np.ndarray:
        if self.symmetric:
            return np.concatenate([self.normals, -self.normals], axis=1)
        return self.normals

    def copy(self) -> "PrimitiveGroup":
        return PrimitiveGroup(
            self.centers.copy(), self.normals.copy(), self.offsets.copy(),
            self.log_delta.copy(), self.symmetric,
        )

    def check_finite(self):
        for name in ("centers", "normals", "offsets", "log_delta"):
            if not np.isfinite(getattr(self, name)).all():
                raise EvaluationError(f"non-finite primitive {name}")

    @classmethod
    def empty(cls, faces=6, symmetric=True) -> "PrimitiveGroup":
        g = faces // 2 if symmetric else faces
        return cls(np.zeros((0, 3)), np.zeros((0, g, 3)), np.zeros((0, faces)),
                   np.zeros(0), symmetric)

    @classmethod
    def pack(cls, prims: Sequence[ConvexPrimitive], faces=None, symmetric=None) -> "PrimitiveGroup":
        prims = list(prims)
        if not prims:
            return cls.empty(6 if faces is None else faces, True if symmetric is None else symmetric)
        layouts = {(p.face_count, p.symmetric) for p in prims}
        if len(layouts) != 1:
            raise ValueError(f"cannot pack primitives with mixed face layouts {sorted(layouts)}")
        return cls(
            np.stack([p.center for p in prims]),
            np.stack([p.normals for p in prims]),
            np.stack([p.offsets for p in prims]),
            np.log([p.blend_delta for p in prims]),
            prims[0].symmetric,
        )

    def unpack(self) -> list:
        return [
            ConvexPrimitive(self.centers[k], self.normals[k], self.offsets[k],
                            float(np.exp(self.log_delta[k])), self.symmetric)
            for k in range(len(self))
        ]


def pack_model(m: CsgModel):
    pos = PrimitiveGroup.pack(m.positives)
    neg = PrimitiveGroup.pack(m.negatives, faces=pos.face_count, symmetric=pos.symmetric)
    return pos, neg


def phi_pass(centers, face_normals, offsets, delta, X, keep=False):
    """Batched LogSumExp field for ``K`` primitives.

    ``X`` is ``(N, 3)`` (shared) or ``(K, N, 3)`` (one point set per
    primitive).  Returns ``phi`` of shape ``(K, N)``; with ``keep`` also the
    softmax weights and affine values, both laid out ``(K, f, N)``, needed to
    backpropagate.
    """
    K, f = offsets.shape
    inv = 1.0 / delta
    # z = a / delta directly: scale the planes instead of the (K, f, N) block
    fz = face_normals * inv[:, None, None]
    bias = (np.einsum("kfj,kj->kf", face_normals, centers) + offsets) * inv[:, None]
    if X.ndim == 2:
        # one GEMM for every face plane of every primitive
        z = (fz.reshape(K * f, 3) @ X.T).reshape(K, f, -1)
    else:
        z = np.matmul(fz, X.transpose(0, 2, 1))
    z -= bias[:, :, None]
    zmax = z.max(axis=1)
    if keep:
        a = z * delta[:, None, None]
    z -= zmax[:, None, :]
    e = np.exp(z, out=z)
    s = e.sum(axis=1)
    phi = delta[:, None] * (zmax + np.log(s))
    if keep:
        e /= s[:, None, :]
        return phi, e, a
    return phi


def group_phi(group: PrimitiveGroup, X) -> np.ndarray:
    """``phi`` of every primitive in ``group`` at points ``X``: ``(K, N)``."""
    X = np.asarray(X, dtype=np.float64)
    if len(group) == 0:
        return np.zeros((0,) + X.shape[:-1][-1:])
    group.check_finite()
    return phi_pass(group.centers, group.face_normals(), group.offsets, group.delta, X)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def smooth_union_weights(C, temperature):
    """Softmax weights over primitives (axis 0) used by the smooth union."""
    z = C / temperature
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def union_from_indicators(C, temperature=None):
    """Combine per-primitive indicators ``(K, N)`` into a set indicator ``(N,)``.

    Hard max by default; with ``temperature`` a softmax-weighted mean, which
    never exceeds the hard max.
    """
    if C.shape[0] == 0:
        return np.zeros(C.shape[1])
    if temperature is None:
        return C.max(axis=0)
    return (smooth_union_weights(C, temperature) * C).sum(axis=0)


# ---------------------------------------------------------------------------
# Public pointwise operations.


def convex_phi(p: ConvexPrimitive, x):
    """Smoothed max of the primitive's face planes at ``x``."""
    if not (np.isfinite(p.center).all() and np.isfinite(p.normals).all()
            and np.isfinite(p.offsets).all() and np.isfinite(p.blend_delta)):
        raise EvaluationError("non-finite primitive parameters")
    X, single = _points(x)
    z = p.affine(X) / p.blend_delta
    zmax = z.max(axis=-1)
    phi = p.blend_delta * (zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=-1)))
    return float(phi[0]) if single else phi


def convex_indicator(p: ConvexPrimitive, x, sigma=DEFAULT_SIGMA):
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return sigmoid(-sigma * convex_phi(p, x))


def union_indicator(prims, x, sigma=DEFAULT_SIGMA, temperature=None):
    """Indicator of a primitive set; 0 for an empty set."""
    X, single = _points(x)
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if len(prims) == 0:
        out = np.zeros(X.shape[0])
    else:
        out = union_from_indicators(sigmoid(-sigma * group_phi(PrimitiveGroup.pack(prims), X)),
                                    temperature)
    return float(out[0]) if single else out


def csg_indicator(m: CsgModel, x, temperature=None):
    """``relu(O+(x) - O-(x))``."""
    X, single = _points(x)
    pos, neg = pack_model(m)
    out = _indicator_packed(pos, neg, m.sharpness_sigma, X, temperature)
    return float(out[0]) if single else out


def _indicator_packed(pos, neg, sigma, X, temperature=None):
    o_pos = union_from_indicators(sigmoid(-sigma * group_phi(pos, X)), temperature)
    if len(neg):
        o_neg = union_from_indicators(sigmoid(-sigma * group_phi(neg, X)), temperature)
    else:
        o_neg = 0.0
    return np.maximum(o_pos - o_neg, 0.0)


def sdf_terms(pos, neg, X):
    """``(min_k phi+_k, max_j -phi-_j)``; the second is ``-inf`` without negatives."""
    pos_term = group_phi(pos, X).min(axis=0)
    if len(neg):
        neg_term = (-group_phi(neg, X)).max(axis=0)
    else:
        neg_term = np.full(pos_term.shape, -np.inf)
    return pos_term, neg_term


def sdf_packed(pos, neg, X):
    pos_term, neg_term = sdf_terms(pos, neg, X)
    return np.maximum(pos_term, neg_term)


def csg_sdf(m: CsgModel, x):
    """Approximate signed distance to the CSG solid (1-Lipschitz, not exact)."""
    X, single = _points(x)
    pos, neg = pack_model(m)
    out = sdf_packed(pos, neg, X)
    return float(out[0]) if single else out


def face_labels_packed(pos, neg, X):
    """Vectorized face labelling: ``(N, 3)`` int array, ``-1`` for no negative."""
    phi_pos = group_phi(pos, X)
    j = phi_pos.argmin(axis=0)
    pos_term = phi_pos[j, np.arange(X.shape[0])]
    labels = np.empty((X.shape[0], 3), dtype=np.int64)
    labels[:, 1] = j
    labels[:, 2] = -1
    fn_pos = pos.face_normals()
    a_pos = np.einsum("nj,nfj->nf", X - pos.centers[j], fn_pos[j]) - pos.offsets[j]
    labels[:, 0] = a_pos.argmax(axis=1)
    if len(neg):
        neg_vals = -group_phi(neg, X)
        k = neg_vals.argmax(axis=0)
        neg_term = neg_vals[k, np.arange(X.shape[0])]
        is_neg = neg_term > pos_term + _TIE_TOLERANCE
        if is_neg.any():
            kn = k[is_neg]
            Xn = X[is_neg]
            fn_neg = neg.face_normals()
            a_neg = np.einsum("nj,nfj->nf", Xn - neg.centers[kn], fn_neg[kn]) - neg.offsets[kn]
            labels[is_neg, 0] = a_neg.argmax(axis=1)
            labels[is_neg, 2] = kn
    return labels


def face_label_at(m: CsgModel, x_hit, tolerance=SURFACE_TOLERANCE) -> FaceTriple:
    """Identify the boundary patch that owns a surface point."""
    X, _ = _points(x_hit)
    pos, neg = pack_model(m)
    value = float(sdf_packed(pos, neg, X[:1])[0])
    if abs(value) > tolerance:
        raise EvaluationError(f"point is not on the surface (sdf={value:.3g})")
    f, j, k = (int(v) for v in face_labels_packed(pos, neg, X[:1])[0])
    return FaceTriple(f, j, None if k < 0 else k)


def max_label_count(f: int, k_total: int, k_neg: int) -> int:
    """Upper bound ``f * K+ * (1 + K-)`` on distinct face labels."""
    if f < 4:
        raise ValueError(f"face count must be >= 4, got {f}")
    if not 0 <= k_neg < k_total:
        raise ValueError(f"need 0 <= k_neg < k_total, got k_neg={k_neg}, k_total={k_total}")
    return f * (k_total - k_neg) * (1 + k_neg)
