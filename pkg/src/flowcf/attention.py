"""Spatial-temporal attention over warped feature maps.

Pipeline: each warped map and the reference map go through a shared
bottleneck embedding; per-location cosine similarity to the reference is
softmaxed across frames; a pooled descriptor of those weights drives three
FC layers whose sigmoid outputs gate (and renormalize) the per-frame maps;
the gated weights form a convex combination of the warped features.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, InvalidInputError
from .featext import (DESK_FEATURE_SPEC, WIDE_FEATURE_SPEC, ConvNetParams, FeaturePatch, convnet_apply,
                      convnet_apply_backward, init_convnet, kink_margin)
from .ndkit import as_tensor3

DESK_EMBED_SPEC = [(1, 16), (3, 16), (1, 32)]
WIDE_EMBED_SPEC = [(1, 64), (3, 64), (1, 256)]
DESK_GATE_WIDTHS = (64, 64)
WIDE_GATE_WIDTHS = (128, 128)

# (feature net spec, embedding spec, gate hidden widths) per named size
MODEL_SIZES = {
    "desk": (DESK_FEATURE_SPEC, DESK_EMBED_SPEC, DESK_GATE_WIDTHS),
    "wide": (WIDE_FEATURE_SPEC, WIDE_EMBED_SPEC, WIDE_GATE_WIDTHS),
}


# Embedding parameters are a ConvNetParams with three layers (1x1 reduce,
# 3x3, 1x1 expand) and pool = 1.
EMBED_RELU = (True, True, False)


def init_embedding(c_in, spec=DESK_EMBED_SPEC, seed=0):
    return init_convnet(spec, c_in, pool=1, seed=seed, relu=EMBED_RELU)


@dataclass
class GateParams:
    """Three FC layers T -> d1 -> d2 -> T; weights are (out, in)."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        t = self.w1.shape[1]
        chain = [(self.w1, self.b1), (self.w2, self.b2), (self.w3, self.b3)]
        prev = t
        for i, (w, b) in enumerate(chain):
            if w.ndim != 2 or w.shape[1] != prev or b.shape != (w.shape[0],):
                raise InvalidInputError(f"gate layer {i + 1}: inconsistent shapes {w.shape}, {b.shape}")
            prev = w.shape[0]
        if prev != t:
            raise InvalidInputError(f"gate output width {prev} != input width {t}")

    @property
    def T(self):
        return self.w1.shape[1]

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    @classmethod
    def from_arrays(cls, arrs):
        return cls(*arrs)

    def copy(self):
        return GateParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self):
        return GateParams(*(np.zeros_like(a) for a in self.arrays()))


def init_gates(T, widths=DESK_GATE_WIDTHS, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    dims = [T, widths[0], widths[1], T]
    arrs = []
    for i in range(3):
        std = scale * np.sqrt(2.0 / dims[i])
        arrs += [rng.normal(0.0, std, (dims[i + 1], dims[i])), np.zeros(dims[i + 1])]
    return GateParams(*arrs)


@dataclass(frozen=True)
class WeightStack:
    weights: np.ndarray  # (h, w, T)
    frame_ids: tuple = ()

    @property
    def T(self):
        return self.weights.shape[2]


def _map(fp, name):
    return as_tensor3(getattr(fp, "map", fp), name)


def embed(phi, params):
    """Project features through the embedding stack; returns (FeaturePatch, cache)."""
    out, cache = convnet_apply(_map(phi, "phi"), params)
    return FeaturePatch(out, getattr(phi, "stride", 1), getattr(phi, "windowed", False)), cache


def embed_backward(grad_out, cache):
    return convnet_apply_backward(grad_out, cache)


def _cosine(a, b):
    """Per-location cosine over channels; zero-norm vectors give 0."""
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    dot = np.sum(a * b, axis=2)
    denom = na * nb
    ok = denom > 0
    s = np.where(ok, dot / np.where(ok, denom, 1.0), 0.0)
    return s, na, nb, ok


def _softmax(s):
    m = s.max(axis=2, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=2, keepdims=True)


@dataclass
class SpatialCache:
    emb: list
    ref: np.ndarray
    sims: list  # (s, na, nb, ok) per frame
    weights: np.ndarray


def spatial_weights_cached(warped_emb, ref_emb, frame_ids=()):
    maps = [_map(e, f"warped_emb[{i}]") for i, e in enumerate(warped_emb)]
    ref = _map(ref_emb, "ref_emb")
    if not maps:
        raise InvalidInputError("need at least one warped embedding")
    for i, m in enumerate(maps):
        if m.shape != ref.shape:
            raise InvalidInputError(f"warped_emb[{i}] shape {m.shape} != reference {ref.shape}")
    sims = [_cosine(m, ref) for m in maps]
    s = np.stack([v[0] for v in sims], axis=2)
    w = _softmax(s)
    return WeightStack(w, tuple(frame_ids)), SpatialCache(maps, ref, sims, w)


def spatial_weights(warped_emb, ref_emb, frame_ids=()):
    """Softmax across frames of the per-location cosine similarity to the reference."""
    return spatial_weights_cached(warped_emb, ref_emb, frame_ids)[0]


def spatial_weights_backward(grad_w, cache):
    w = cache.weights
    gs = w * (grad_w - np.sum(w * grad_w, axis=2, keepdims=True))
    ref = cache.ref
    g_ref = np.zeros_like(ref)
    g_emb = []
    for i, (a, (s, na, nb, ok)) in enumerate(zip(cache.emb, cache.sims)):
        gi = np.where(ok, gs[:, :, i], 0.0)[:, :, None]
        na3 = np.where(ok, na, 1.0)[:, :, None]
        nb3 = np.where(ok, nb, 1.0)[:, :, None]
        s3 = s[:, :, None]
        g_emb.append(gi * (ref / (na3 * nb3) - s3 * a / na3 ** 2))
        g_ref += gi * (a / (na3 * nb3) - s3 * ref / nb3 ** 2)
    return g_emb, g_ref


# Logits are clipped here so that sigmoid stays strictly inside (0, 1) in
# float64; beyond the clip the gate is constant and its gradient is zero.
LOGIT_CLIP = 30.0


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.clip(x, -LOGIT_CLIP, LOGIT_CLIP)))


@dataclass
class GateCache:
    d: np.ndarray
    h1: np.ndarray
    a1: np.ndarray
    h2: np.ndarray
    a2: np.ndarray
    logits: np.ndarray
    gates: np.ndarray
    params: GateParams
    hw: int


def temporal_gate_cached(stack, params):
    w = stack.weights
    if w.shape[2] != params.T:
        raise InvalidInputError(f"stack has {w.shape[2]} frames, gate expects {params.T}")
    d = w.mean(axis=(0, 1))
    h1 = params.w1 @ d + params.b1
    a1 = np.maximum(h1, 0.0)
    h2 = params.w2 @ a1 + params.b2
    a2 = np.maximum(h2, 0.0)
    logits = params.w3 @ a2 + params.b3
    gates = _sigmoid(logits)
    return gates, GateCache(d, h1, a1, h2, a2, logits, gates, params, w.shape[0] * w.shape[1])


def temporal_gate(stack, params):
    """Per-frame gates in (0, 1) from the spatially pooled weight maps."""
    return temporal_gate_cached(stack, params)[0]


def temporal_gate_backward(grad_gates, cache):
    """Returns (grad w.r.t. the stack weights, GateParams gradient)."""
    p = cache.params
    g3 = grad_gates * cache.gates * (1 - cache.gates) * (np.abs(cache.logits) < LOGIT_CLIP)
    gw3 = np.outer(g3, cache.a2)
    g2 = (p.w3.T @ g3) * (cache.h2 > 0)
    gw2 = np.outer(g2, cache.a1)
    g1 = (p.w2.T @ g2) * (cache.h1 > 0)
    gw1 = np.outer(g1, cache.d)
    gd = p.w1.T @ g1
    return gd / cache.hw, GateParams(gw1, g1, gw2, g2, gw3, g3)


def apply_gates(stack, gates, renormalize=True):
    """w'_i(p) = g_i w_i(p) / sum_j g_j w_j(p); without renormalization just g_i w_i(p)."""
    g = np.asarray(gates, dtype=np.float64)
    if g.shape != (stack.T,):
        raise InvalidInputError(f"{g.size} gates for {stack.T} frames")
    if np.any(g <= 0):
        raise InvalidInputError("gates must be positive")
    a = stack.weights * g
    if not renormalize:
        return WeightStack(a, stack.frame_ids)
    tot = a.sum(axis=2, keepdims=True)
    if np.any(tot <= 0):
        raise ConsistencyError("gated weights sum to zero")
    return WeightStack(a / tot, stack.frame_ids)


def apply_gates_backward(grad_out, stack, gates, renormalize=True):
    w = stack.weights
    if not renormalize:
        return grad_out * gates, np.sum(grad_out * w, axis=(0, 1))
    a = w * gates
    tot = a.sum(axis=2, keepdims=True)
    wp = a / tot
    ga = (grad_out - np.sum(grad_out * wp, axis=2, keepdims=True)) / tot
    return ga * gates, np.sum(ga * w, axis=(0, 1))


def aggregate(warped, stack):
    """Convex combination of the warped maps with per-location weights."""
    maps = [_map(m, f"warped[{i}]") for i, m in enumerate(warped)]
    w = stack.weights
    if len(maps) != w.shape[2]:
        raise InvalidInputError(f"{len(maps)} maps for {w.shape[2]} weight channels")
    for i, m in enumerate(maps):
        if m.shape[:2] != w.shape[:2] or m.shape != maps[0].shape:
            raise InvalidInputError(f"warped[{i}] shape {m.shape} inconsistent with weights {w.shape}")
    if all(np.array_equal(m, maps[0]) for m in maps[1:]) and np.abs(w.sum(axis=2) - 1).max() <= 1e-6:
        # a convex combination of one map is that map; skip the rounding
        out = maps[0].copy()
    else:
        out = np.zeros_like(maps[0])
        for i, m in enumerate(maps):
            out += w[:, :, i:i + 1] * m
    first = warped[0]
    if isinstance(first, FeaturePatch):
        return FeaturePatch(out, first.stride, first.windowed)
    return out


def decay_stack(h, w, T, rate):
    """Weights proportional to (1 - rate)^age, newest frame last."""
    ages = np.arange(T - 1, -1, -1, dtype=np.float64)
    wt = (1.0 - rate) ** ages
    wt /= wt.sum()
    return WeightStack(np.broadcast_to(wt, (h, w, T)).copy())


def uniform_stack(h, w, T):
    return WeightStack(np.full((h, w, T), 1.0 / T))


# --- full pipeline -------------------------------------------------------------

@dataclass
class AttentionCache:
    warped: list
    emb_caches: list
    ref_cache: object
    spatial: SpatialCache
    stack: WeightStack
    gate_cache: GateCache
    gates: np.ndarray
    gated: WeightStack
    renormalize: bool


@dataclass
class AttentionGrads:
    warped: list
    ref: np.ndarray
    embedding: ConvNetParams
    gates: GateParams


def attention_forward(warped, ref, emb_params, gate_params=None, renormalize=True, frame_ids=()):
    """embed -> spatial_weights -> temporal_gate -> apply_gates -> aggregate.

    ``gate_params=None`` skips temporal gating (spatial attention only).
    Returns (aggregate FeaturePatch or array, final WeightStack, cache).
    """
    maps = [_map(m, f"warped[{i}]") for i, m in enumerate(warped)]
    ref_map = _map(ref, "ref")
    embs, caches = [], []
    for m in maps:
        e, c = convnet_apply(m, emb_params)
        embs.append(e)
        caches.append(c)
    ref_emb, ref_cache = convnet_apply(ref_map, emb_params)
    stack, scache = spatial_weights_cached(embs, ref_emb, frame_ids)
    if gate_params is not None:
        gates, gcache = temporal_gate_cached(stack, gate_params)
        gated = apply_gates(stack, gates, renormalize)
    else:
        gates, gcache, gated = np.ones(len(maps)), None, stack
    out = aggregate(warped, gated)
    cache = AttentionCache(maps, caches, ref_cache, scache, stack, gcache, gates, gated, renormalize)
    return out, gated, cache


def attention_backward(grad_phi_bar, cache, emb_params, gate_params=None):
    """Exact gradients of the aggregate w.r.t. every input and parameter."""
    g = np.asarray(getattr(grad_phi_bar, "map", grad_phi_bar), dtype=np.float64)
    if g.shape != cache.warped[0].shape:
        raise InvalidInputError(f"grad shape {g.shape} != aggregate shape {cache.warped[0].shape}")
    wg = cache.gated.weights
    g_warp = [wg[:, :, i:i + 1] * g for i in range(len(cache.warped))]
    g_wg = np.stack([np.sum(g * m, axis=2) for m in cache.warped], axis=2)

    if cache.gate_cache is not None:
        g_w, g_gates = apply_gates_backward(g_wg, cache.stack, cache.gates, cache.renormalize)
        g_d, g_gate_params = temporal_gate_backward(g_gates, cache.gate_cache)
        g_w = g_w + g_d[None, None, :]
    else:
        g_w, g_gate_params = g_wg, None

    g_emb, g_ref_emb = spatial_weights_backward(g_w, cache.spatial)
    g_emb_params = None
    for i, (ge, c) in enumerate(zip(g_emb, cache.emb_caches)):
        gx, gp = convnet_apply_backward(ge, c)
        g_warp[i] = g_warp[i] + gx
        g_emb_params = gp if g_emb_params is None else _add_params(g_emb_params, gp)
    g_ref, gp = convnet_apply_backward(g_ref_emb, cache.ref_cache)
    g_emb_params = _add_params(g_emb_params, gp)
    return AttentionGrads(g_warp, g_ref, g_emb_params, g_gate_params)


def _add_params(a, b):
    out = a.copy()
    for la, lb in zip(out.layers, b.layers):
        la.kernel += lb.kernel
        la.bias += lb.bias
    return out


def attention_kink_margin(cache):
    """Distance to the closest non-smooth point: a ReLU pre-activation at 0,
    or an embedding vector at zero norm (where the cosine switches to 0)."""
    vals = [kink_margin(c) for c in cache.emb_caches + [cache.ref_cache]]
    vals += [min(na.min(), nb.min()) for _, na, nb, _ in cache.spatial.sims]
    if cache.gate_cache is not None:
        vals += [np.abs(cache.gate_cache.h1).min(), np.abs(cache.gate_cache.h2).min()]
    return min(vals)
