"""Central finite-difference checks for every hand-written backward pass.

Each check draws a random instance, projects the op's output onto a random
tensor G to get a scalar loss, and compares the analytic gradient with
central differences on a random subset of coordinates. The error of one
instance is ||a - n||_inf / max(||a||_inf, ||n||_inf) over all sampled
coordinates of all inputs together. Instances whose ReLU pre-activations
or bilinear sample positions lie within ``KINK_MARGIN`` of a kink are
redrawn, since central differences are meaningless there.
"""
import time
from dataclasses import dataclass

import numpy as np

from .attention import (attention_backward, attention_forward, attention_kink_margin, init_embedding,
                        init_gates, temporal_gate_backward, temporal_gate_cached, WeightStack)
from .cflayer import cf_backward, cf_forward_loss, gaussian_label
from .featext import convnet_apply, convnet_apply_backward, init_convnet, kink_margin
from .flowwarp import warp, warp_backward

EPS = 1e-5
KINK_MARGIN = 1e-4
TOLERANCE = 1e-4
COORDS_PER_ARRAY = 24
MAX_REDRAWS = 50


@dataclass
class CheckResult:
    component: str
    errors: list  # one relative error per instance
    seconds: float

    @property
    def max_error(self):
        return max(self.errors)

    @property
    def ok(self):
        return self.max_error < TOLERANCE


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def compare(loss_fn, arrays, grads, rng, per_array=COORDS_PER_ARRAY, eps=EPS):
    """Finite differences of ``loss_fn()`` w.r.t. entries of ``arrays`` (mutated
    in place and restored) against the matching ``grads``."""
    ana, num = [], []
    for arr, g in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        k = min(per_array, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn()
            flat[i] = old - eps
            lm = loss_fn()
            flat[i] = old
            num.append((lp - lm) / (2 * eps))
            ana.append(gflat[i])
    return rel_error(ana, num)


def _redraw(rng, draw):
    for _ in range(MAX_REDRAWS):
        inst = draw(rng)
        if inst is not None:
            return inst
    raise RuntimeError("could not draw an instance away from kinks")


# --- components ------------------------------------------------------------------

def check_cf(rng):
    h, w, c = 8, 8, 2
    x = rng.normal(size=(h, w, c))
    z = rng.normal(size=(h, w, c))
    y = gaussian_label(h, w, 1.0)
    desired = gaussian_label(h, w, 1.0, (h // 2 + rng.uniform(-1, 1), w // 2 + rng.uniform(-1, 1)))
    lam = 1e-2

    def loss():
        return cf_forward_loss(x, z, y, desired, lam)[0]

    _, cache = cf_forward_loss(x, z, y, desired, lam)
    gx, gz = cf_backward(cache)
    return compare(loss, [x, z], [gx, gz], rng)


def _draw_warp(rng):
    h, w, c = 8, 8, 3
    flow = rng.uniform(-2.5, 2.5, (h, w, 2))
    rows, cols = np.indices((h, w))
    pos = [rows + flow[:, :, 1], cols + flow[:, :, 0]]
    for p, n in zip(pos, (h, w)):
        frac = np.abs(p - np.round(p))
        # kinks at every integer inside the grid, and at the clamp edges 0 and n-1
        if np.any(frac < KINK_MARGIN):
            return None
    return rng.normal(size=(h, w, c)), flow, rng.normal(size=(h, w, c))


def check_warp(rng):
    phi, flow, G = _redraw(rng, _draw_warp)

    def loss():
        return float(np.sum(G * warp(phi, flow)))

    g_phi, g_flow = warp_backward(G, phi, flow)
    return compare(loss, [phi, flow], [g_phi, g_flow], rng)


def _check_stack(rng, make_params, shape):
    def draw(r):
        params = make_params(r)
        x = r.normal(size=shape)
        _, cache = convnet_apply(x, params)
        return (params, x) if kink_margin(cache) > KINK_MARGIN else None

    params, x = _redraw(rng, draw)
    out, cache = convnet_apply(x, params)
    G = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(G * convnet_apply(x, params)[0]))

    gx, gp = convnet_apply_backward(G, cache)
    return compare(loss, [x] + params.arrays(), [gx] + gp.arrays(), rng)


def check_convnet(rng):
    return _check_stack(rng, lambda r: init_convnet([(3, 4), (3, 3)], 2, pool=2,
                                                    seed=int(r.integers(2 ** 31))), (8, 8, 2))


def check_embedding(rng):
    return _check_stack(rng, lambda r: init_embedding(3, [(1, 4), (3, 4), (1, 5)],
                                                      seed=int(r.integers(2 ** 31))), (6, 6, 3))


def check_gate(rng):
    T = 4

    def draw(r):
        params = init_gates(T, (6, 5), seed=int(r.integers(2 ** 31)))
        for b in (params.b1, params.b2):
            b += r.normal(0, 0.3, b.shape)
        s = r.normal(size=(5, 5, T))
        w = np.exp(s) / np.exp(s).sum(axis=2, keepdims=True)
        _, cache = temporal_gate_cached(WeightStack(w), params)
        if min(np.abs(cache.h1).min(), np.abs(cache.h2).min()) < KINK_MARGIN:
            return None
        return params, w

    params, w = _redraw(rng, draw)
    G = rng.normal(size=T)
    _, cache = temporal_gate_cached(WeightStack(w), params)
    gd, gp = temporal_gate_backward(G, cache)
    g_w = np.broadcast_to(gd, w.shape)

    def loss():
        return float(np.sum(G * temporal_gate_cached(WeightStack(w), params)[0]))

    return compare(loss, [w] + params.arrays(), [g_w] + gp.arrays(), rng)


def check_attention(rng):
    T, h, w, c = 3, 5, 5, 3

    def draw(r):
        emb = init_embedding(c, [(1, 4), (3, 4), (1, 5)], seed=int(r.integers(2 ** 31)))
        gates = init_gates(T, (6, 5), seed=int(r.integers(2 ** 31)))
        for b in (gates.b1, gates.b2):
            b += r.normal(0, 0.3, b.shape)
        warped = [r.normal(size=(h, w, c)) for _ in range(T)]
        ref = r.normal(size=(h, w, c))
        _, _, cache = attention_forward(warped, ref, emb, gates)
        if attention_kink_margin(cache) < KINK_MARGIN:
            return None
        return emb, gates, warped, ref

    emb, gates, warped, ref = _redraw(rng, draw)
    _out, _, cache = attention_forward(warped, ref, emb, gates)
    G = rng.normal(size=_out.shape)
    g = attention_backward(G, cache, emb, gates)

    def loss():
        return float(np.sum(G * attention_forward(warped, ref, emb, gates)[0]))

    arrays = warped + [ref] + emb.arrays() + gates.arrays()
    grads = g.warped + [g.ref] + g.embedding.arrays() + g.gates.arrays()
    return compare(loss, arrays, grads, rng, per_array=8)


COMPONENTS = {
    "cf_backward": check_cf,
    "warp_backward": check_warp,
    "convnet": check_convnet,
    "embedding": check_embedding,
    "temporal_gate": check_gate,
    "attention": check_attention,
}


def run_component(name, seed=0, instances=10):
    fn = COMPONENTS[name]
    rng = np.random.default_rng([seed, list(COMPONENTS).index(name)])
    t0 = time.perf_counter()
    errors = [fn(rng) for _ in range(instances)]
    return CheckResult(name, errors, time.perf_counter() - t0)


def run_suite(seed=0, instances=10):
    return [run_component(name, seed, instances) for name in COMPONENTS]
