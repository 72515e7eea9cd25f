"""Gradient of the training objective and the first-order fitting loop.

The gradient is a hand-written reverse pass over the batched field
evaluation: sample/overlap terms flow back through the union max, the
sigmoid and the LogSumExp into centers, normals, offsets and ``log(delta)``.
The fit is random-start (or warm-start) AdamW with a linear warmup and two
learning-rate halvings, re-drawing a fresh sample subset every step.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    DEFAULT_SIGMA, DELTA_BOUNDS, ConvexPrimitive, CsgModel, PrimitiveGroup, pack_model, phi_pass,
    sigmoid, smooth_union_weights,
)
from .errors import DivergenceError
from .losses import DEFAULT_NEIGHBORS, TERMS, LossWeights, SurfaceAnchors, evaluate_terms
from .sampling import SampleSet, SceneSamples

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class FitConfig:
    k_total: int = 12
    k_neg: int = 0
    faces: int = 6
    symmetric: bool = True
    steps: int = 2000
    base_lr: float = 0.01
    warmup_frac: float = 0.25
    halve_at: tuple = (0.5, 0.75)
    weight_decay: float = 0.01
    subsample_fraction: float = 0.10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    sigma: float = DEFAULT_SIGMA
    neighbors: int = DEFAULT_NEIGHBORS
    union_temperature: float | None = None
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.k_total < 1:
            raise ValueError("k_total must be >= 1")
        if self.k_neg < 0:
            raise ValueError("k_neg must be >= 0")
        if self.k_neg >= self.k_total:
            raise ValueError("k_neg must be < k_total")
        if self.faces < 4 or (self.symmetric and self.faces % 2):
            raise ValueError(f"invalid face count {self.faces} for symmetric={self.symmetric}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for name in ("warmup_frac", "subsample_fraction"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in (0, 1]")
        object.__setattr__(self, "halve_at", tuple(self.halve_at))


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.m.copy(), self.v.copy(), self.step)


@dataclass
class FitTrace:
    total: np.ndarray
    terms: np.ndarray  # (steps, 5) in TERMS order
    lr: np.ndarray
    wall_time: float = 0.0
    absrel: dict = field(default_factory=dict)  # step -> value, optional

    def __len__(self):
        return len(self.total)

    def rows(self):
        for t in range(len(self.total)):
            yield (t, float(self.lr[t]), float(self.total[t]), *map(float, self.terms[t]))


# ---------------------------------------------------------------------------
# Parameter vector layout.

_FIELDS = ("centers", "normals", "offsets", "log_delta")


def flatten(pos: PrimitiveGroup, neg: PrimitiveGroup) -> np.ndarray:
    return np.concatenate([getattr(g, f).ravel() for g in (pos, neg) for f in _FIELDS])


def unflatten(theta, like_pos: PrimitiveGroup, like_neg: PrimitiveGroup):
    out, i = [], 0
    for g in (like_pos, like_neg):
        arrays = []
        for f in _FIELDS:
            ref = getattr(g, f)
            arrays.append(np.asarray(theta[i:i + ref.size]).reshape(ref.shape))
            i += ref.size
        out.append(PrimitiveGroup(*arrays, symmetric=g.symmetric))
    return out[0], out[1]


def decay_mask(pos: PrimitiveGroup, neg: PrimitiveGroup) -> np.ndarray:
    """True on offsets and ``log(delta)``; centers and normals are not decayed."""
    return np.concatenate([
        np.full(getattr(g, f).size, f in ("offsets", "log_delta"))
        for g in (pos, neg) for f in _FIELDS
    ])


def model_vector(m: CsgModel) -> np.ndarray:
    return flatten(*pack_model(m))


def model_from_vector(theta, like: CsgModel) -> CsgModel:
    pos, neg = unflatten(theta, *pack_model(like))
    return CsgModel(pos.unpack(), neg.unpack(), like.sharpness_sigma, like.scene_transform)


# ---------------------------------------------------------------------------
# Forward + reverse pass.


def _phi_backward(gphi, weights, a, phi, X, centers, fn, symmetric):
    """Pull ``dL/dphi`` (K, N) back to one group's parameter gradients."""
    K, f = fn.shape[:2]
    ga = gphi[:, None, :] * weights  # (K, f, N)
    ga_sum = ga.sum(axis=2)
    if X.ndim == 2:
        g_fn = (ga.reshape(K * f, -1) @ X).reshape(K, f, 3)
    else:
        g_fn = np.matmul(ga, X)
    g_fn -= ga_sum[:, :, None] * centers[:, None, :]
    g_off = -ga_sum
    g_c = -np.einsum("kf,kfj->kj", ga_sum, fn)
    g_logd = (gphi * (phi - (weights * a).sum(axis=1))).sum(axis=1)
    if symmetric:
        g = f // 2
        g_n = g_fn[:, :g] - g_fn[:, g:]
    else:
        g_n = g_fn
    return g_c, g_n, g_off, g_logd


def _union_backward(C, g_union, temperature):
    """Distribute ``dL/dO`` (N,) over per-primitive indicators (K, N)."""
    gC = np.zeros_like(C)
    if temperature is None:
        top = C.argmax(axis=0)
        gC[top, np.arange(C.shape[1])] = g_union
    else:
        s = smooth_union_weights(C, temperature)
        o = (s * C).sum(axis=0)
        gC = g_union * s * (1.0 + (C - o) / temperature)
    return gC


def _union(C, temperature):
    if C.shape[0] == 0:
        return np.zeros(C.shape[1])
    if temperature is None:
        return C.max(axis=0)
    return (smooth_union_weights(C, temperature) * C).sum(axis=0)


def loss_and_grad(pos: PrimitiveGroup, neg: PrimitiveGroup, sigma: float, batch: SampleSet,
                  anchors: SurfaceAnchors, weights: LossWeights,
                  neighbors: int = DEFAULT_NEIGHBORS, temperature=None):
    """Raw terms (5,) and gradient groups ``(grad_pos, grad_neg)`` of the weighted total."""
    X, y = batch.points, batch.labels
    N = len(y)
    if N == 0:
        raise ValueError("sample batch is empty")
    ws, wo, wu, wg, wl = weights.vector()
    groups = [g for g in (pos, neg)]
    fns = [g.face_normals() for g in groups]
    deltas = [g.delta for g in groups]
    grads = [[np.zeros_like(g.centers), np.zeros_like(g.normals),
              np.zeros_like(g.offsets), np.zeros_like(g.log_delta)] for g in groups]

    def accumulate(gi, parts):
        for acc, part in zip(grads[gi], parts):
            acc += part

    # sample + overlap terms
    cache, C = [], []
    for gi, g in enumerate(groups):
        if len(g) == 0:
            cache.append(None)
            C.append(np.zeros((0, N)))
            continue
        phi, w, a = phi_pass(g.centers, fns[gi], g.offsets, deltas[gi], X, keep=True)
        cache.append((phi, w, a))
        C.append(sigmoid(-sigma * phi))
    o_pos = _union(C[0], temperature)
    o_neg = _union(C[1], temperature)
    diff = o_pos - o_neg
    occ = np.maximum(diff, 0.0)
    resid = occ - y
    l_sample = float(np.mean(resid ** 2))
    g_diff = ws * 2.0 * resid / N * (diff > 0)

    excess = np.maximum(C[0].sum(axis=0) - 1.0, 0.0)
    l_overlap = float(np.mean(excess ** 2))

    gC_pos = _union_backward(C[0], g_diff, temperature) + wo * 2.0 * excess / N
    gCs = [gC_pos]
    if len(neg):
        gCs.append(_union_backward(C[1], -g_diff, temperature))
    for gi, gC in enumerate(gCs):
        phi, w, a = cache[gi]
        gphi = gC * (-sigma) * C[gi] * (1.0 - C[gi])
        accumulate(gi, _phi_backward(gphi, w, a, phi, X, groups[gi].centers, fns[gi],
                                     groups[gi].symmetric))

    # unique parametrization
    n_faces = sum(g.offsets.size for g in groups)
    n_normals = sum(g.normals.shape[0] * g.normals.shape[1] for g in groups)
    l_unique_off, l_unique_nrm = 0.0, 0.0
    for gi, g in enumerate(groups):
        if len(g) == 0:
            continue
        neg_off = np.maximum(-g.offsets, 0.0)
        l_unique_off += float((neg_off ** 2).sum())
        grads[gi][2] += wu * (-2.0 * neg_off) / n_faces
        norms = np.linalg.norm(g.normals, axis=2, keepdims=True)
        l_unique_nrm += float(((norms - 1.0) ** 2).sum())
        grads[gi][1] += wu * 2.0 * (norms - 1.0) * g.normals / np.maximum(norms, 1e-300) / n_normals
    l_unique = l_unique_off / n_faces + l_unique_nrm / n_normals

    # guidance + localization against the static surface index
    k_all = len(pos) + len(neg)
    l_guid, l_loc = 0.0, 0.0
    if len(anchors):
        for gi, g in enumerate(groups):
            if len(g) == 0:
                continue
            idx = anchors.neighbors(g.centers, neighbors)
            Xg = anchors.points[idx]
            phi, w, a = phi_pass(g.centers, fns[gi], g.offsets, deltas[gi], Xg, keep=True)
            M = idx.shape[1]
            l_guid += float((phi ** 2).sum()) / (k_all * M)
            gphi = wg * 2.0 * phi / (k_all * M)
            accumulate(gi, _phi_backward(gphi, w, a, phi, Xg, g.centers, fns[gi], g.symmetric))

            near = anchors.points[anchors.nearest(g.centers)]
            d = g.centers - near
            l_loc += float((d ** 2).sum()) / k_all
            grads[gi][0] += wl * 2.0 * d / k_all

    terms = np.array([l_sample, l_overlap, l_unique, l_guid, l_loc])
    out = [PrimitiveGroup(*gr, symmetric=g.symmetric) for gr, g in zip(grads, groups)]
    return terms, out[0], out[1]


def grad_total_loss(m: CsgModel, s: SampleSet, w: LossWeights | None = None,
                    anchors: SurfaceAnchors | None = None, neighbors: int = DEFAULT_NEIGHBORS,
                    temperature=None) -> np.ndarray:
    """Gradient of the weighted total loss in :func:`model_vector` layout."""
    w = LossWeights() if w is None else w
    anchors = SurfaceAnchors.from_samples(s) if anchors is None else anchors
    pos, neg = pack_model(m)
    pos.check_finite()
    neg.check_finite()
    terms, gp, gn = loss_and_grad(pos, neg, m.sharpness_sigma, s, anchors, w, neighbors, temperature)
    bad = [name for name, v in zip(TERMS, terms) if not np.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite loss term(s): {', '.join(bad)}", term=bad[0])
    return flatten(gp, gn)


# ---------------------------------------------------------------------------
# Optimizer.


def lr_at(t: int, total: int, base: float = 0.01, warmup_frac: float = 0.25,
          halve_at=(0.5, 0.75)) -> float:
    """Linear warmup, then ``base`` halved at each fraction in ``halve_at``."""
    if not 0 <= t < total:
        raise ValueError(f"step {t} outside [0, {total})")
    warm = warmup_frac * total
    if t < warm:
        return base * (t + 1) / warm
    lr = base
    for frac in halve_at:
        if t >= frac * total:
            lr /= 2.0
    return lr


def adamw_step(state: OptimizerState, params, grads, lr: float, weight_decay: float,
               mask=None):
    """One decoupled-weight-decay Adam update; returns ``(params, state)``.

    ``mask`` selects the coordinates that receive weight decay (all if None).
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, "
                         f"state {state.m.shape}")
    b1, b2 = ADAM_BETAS
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    decay = weight_decay if mask is None else weight_decay * np.asarray(mask, dtype=np.float64)
    new = params - lr * decay * params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new, OptimizerState(m, v, step)


# ---------------------------------------------------------------------------
# Initialization and the fit loop.


def _fibonacci_hemisphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _canonical_normals(faces: int, symmetric: bool) -> np.ndarray:
    half = faces // 2
    base = np.eye(3) if half == 3 else _fibonacci_hemisphere(half)
    if symmetric:
        return base
    if faces % 2 == 0:
        return np.concatenate([base, -base])
    i = np.arange(faces) + 0.5
    z = 1.0 - 2.0 * i / faces
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def init_random(cfg: FitConfig, cloud, rng) -> CsgModel:
    """Random start: small near-cubic primitives scattered over the cloud's box."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    lo, hi = cloud.min(axis=0), cloud.max(axis=0)
    k_pos = cfg.k_total - cfg.k_neg
    base = _canonical_normals(cfg.faces, cfg.symmetric)
    centers = lo + (hi - lo) * rng.random((cfg.k_total, 3))
    for j in range(cfg.k_neg):
        centers[k_pos + j] = centers[j % k_pos] + rng.normal(0.0, 0.05, 3)
    offsets = rng.uniform(0.05, 0.15, (cfg.k_total, cfg.faces))
    normals = np.stack([base @ _random_rotation(rng).T for _ in range(cfg.k_total)])
    delta = 0.02
    prims = [
        ConvexPrimitive(centers[k], normals[k], offsets[k], delta, cfg.symmetric)
        for k in range(cfg.k_total)
    ]
    return CsgModel(prims[:k_pos], prims[k_pos:], cfg.sigma)


def _project(pos: PrimitiveGroup, neg: PrimitiveGroup):
    lo, hi = np.log(DELTA_BOUNDS[0]), np.log(DELTA_BOUNDS[1])
    for g in (pos, neg):
        if len(g) == 0:
            continue
        norms = np.linalg.norm(g.normals, axis=2, keepdims=True)
        g.normals /= np.maximum(norms, 1e-12)
        np.clip(g.log_delta, lo, hi, out=g.log_delta)


def fit(scene: SceneSamples, cfg: FitConfig, warm_start: CsgModel | None = None,
        callback=None):
    """Descend on the scene's samples; returns ``(model, trace)``.

    With ``warm_start`` the random initialization is skipped and the given
    model is polished.  ``callback(step, pos, neg)`` is invoked after every
    update if provided.
    """
    rng = np.random.default_rng(cfg.seed)
    if warm_start is None:
        model = init_random(cfg, scene.cloud, rng)
    else:
        model = warm_start
    pos, neg = pack_model(model)
    pos, neg = pos.copy(), neg.copy()
    _project(pos, neg)
    sigma = model.sharpness_sigma
    anchors = SurfaceAnchors(scene.surface_in)
    reservoir = scene.reservoir
    n_batch = math.ceil(cfg.subsample_fraction * len(reservoir))
    wvec = cfg.weights.vector()
    mask = decay_mask(pos, neg)

    theta = flatten(pos, neg)
    state = OptimizerState.zeros(theta.size)
    totals = np.zeros(cfg.steps)
    terms_log = np.zeros((cfg.steps, len(TERMS)))
    lrs = np.zeros(cfg.steps)
    checkpoint = (0, theta.copy(), state.copy(), rng.bit_generator.state)
    lr_scale, diverged = 1.0, False
    start = time.perf_counter()

    t = 0
    while t < cfg.steps:
        if t % cfg.checkpoint_every == 0:
            checkpoint = (t, theta.copy(), state.copy(), rng.bit_generator.state)
        idx = rng.choice(len(reservoir), size=n_batch, replace=False)
        batch = reservoir.take(idx)
        terms, gp, gn = loss_and_grad(pos, neg, sigma, batch, anchors, cfg.weights,
                                      cfg.neighbors, cfg.union_temperature)
        grad = flatten(gp, gn)
        total = float(terms @ wvec)
        if not (np.isfinite(total) and np.isfinite(grad).all()):
            bad = next((n for n, v in zip(TERMS, terms) if not np.isfinite(v)), "gradient")
            if diverged:
                raise DivergenceError(f"loss diverged at step {t} ({bad})", step=t, term=bad)
            diverged = True
            lr_scale *= 0.5
            t, theta, state, rng_state = checkpoint
            theta, state = theta.copy(), state.copy()
            rng.bit_generator.state = rng_state
            pos, neg = unflatten(theta.copy(), pos, neg)
            log.warning("non-finite %s at step %d; rewinding and halving lr", bad, t)
            continue
        lr = lr_scale * lr_at(t, cfg.steps, cfg.base_lr, cfg.warmup_frac, cfg.halve_at)
        theta, state = adamw_step(state, theta, grad, lr, cfg.weight_decay, mask)
        pos, neg = unflatten(theta, pos, neg)
        _project(pos, neg)
        theta = flatten(pos, neg)
        totals[t], terms_log[t], lrs[t] = total, terms, lr
        if callback is not None:
            callback(t, pos, neg)
        t += 1

    fitted = CsgModel(pos.unpack(), neg.unpack(), sigma, scene.transform)
    trace = FitTrace(totals, terms_log, lrs, time.perf_counter() - start)
    return fitted, trace


def evaluation_loss(model: CsgModel, scene: SceneSamples, cfg: FitConfig | None = None,
                    count: int | None = None, seed: int = 12345) -> float:
    """Total loss of ``model`` on a fixed draw (or all) of the scene's samples."""
    cfg = FitConfig() if cfg is None else cfg
    res = scene.reservoir
    if count is not None and count < len(res):
        res = res.take(np.random.default_rng(seed).choice(len(res), count, replace=False))
    pos, neg = pack_model(model)
    anchors = SurfaceAnchors(scene.surface_in)
    terms = evaluate_terms(pos, neg, model.sharpness_sigma, res, anchors, cfg.neighbors,
                           cfg.union_temperature)
    return float(terms @ cfg.weights.vector())


def with_steps(cfg: FitConfig, steps: int, **changes) -> FitConfig:
    return replace(cfg, steps=steps, **changes)
