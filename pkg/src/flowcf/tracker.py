"""Online tracking loop.

Each frame: search the scale pyramid around the previous box with the
current filter bank, pick the penalized peak, then push the re-cropped
patch into a T-deep buffer. When both the peak value and the PNR clear
their running-mean thresholds, the buffered features are warped onto the
newest patch, fused by spatial-temporal attention, and the fused map
updates the bank.
"""
import os
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from scipy import ndimage

from .attention import (MODEL_SIZES, WeightStack, aggregate, apply_gates, attention_forward,
                        decay_stack, init_embedding, init_gates, temporal_gate)
from .cflayer import gaussian_label, response, solve_filters, update_filters
from .errors import InvalidInputError
from .featext import (BoundingBox, FeaturePatch, apply_window, convnet_forward, crop_side,
                      extract_region, fixed_features, init_convnet, to_gray)
from .flowwarp import FlowConfig, estimate_flow, flow_to_grid, read_flo, warp, warp_array

VARIANTS = ("full", "decay", "no_ta", "no_flow")
FEATURES = ("fixed", "convnet")
FLOW_BACKENDS = ("estimated", "dir", "disabled")
PNR_EPS = 1e-12
N_FIXED_CHANNELS = 9  # gray + 8 orientation bins


@dataclass(frozen=True)
class TrackerConfig:
    padding: float = 1.56
    patch_side: int = 128
    T: int = 6
    lam: float = 1e-4
    sigma_factor: float = 0.1
    scale_step: float = 1.025
    n_scales: int = 5
    scale_penalty: float = 0.9925
    update_rate: float = 0.015
    tau_pnr: float = 0.6
    tau_peak: float = 0.6
    pnr_window: int = 5
    warmup: int = 6  # tracked frames accepted unconditionally to seed the running means
    cell: int = 4
    features: str = "fixed"
    model_size: str = "desk"  # or "wide" for the full-width nets
    flow: str = "estimated"
    flow_dir: str = ""
    variant: str = "full"
    window: bool = True
    renormalize: bool = True
    normalize: bool = True  # unit-RMS feature maps before solve/response
    aggregate_into: str = "update"  # or "solve": re-solve the bank from the fused map
    min_scale: float = 0.2
    max_scale: float = 5.0
    seed: int = 0
    params: str = ""  # trained parameter bundle (FCF1 file); empty = seeded init
    flow_levels: int = 3
    flow_iterations: int = 2
    flow_smoothness: float = 0.5
    flow_chain: bool = True  # compose consecutive flows instead of re-estimating every pair

    def __post_init__(self):
        if self.n_scales < 1 or self.n_scales % 2 == 0:
            raise InvalidInputError(f"n_scales must be odd, got {self.n_scales}")
        if not 0 < self.update_rate <= 1:
            raise InvalidInputError(f"update_rate must be in (0, 1], got {self.update_rate}")
        if not self.scale_step > 1:
            raise InvalidInputError(f"scale_step must be > 1, got {self.scale_step}")
        if not 0 < self.scale_penalty <= 1:
            raise InvalidInputError("scale_penalty must be in (0, 1]")
        if self.T < 1:
            raise InvalidInputError("T must be >= 1")
        if self.padding < 0 or self.patch_side < 1 or self.lam < 0 or self.sigma_factor <= 0:
            raise InvalidInputError("padding, patch_side, lam and sigma_factor out of range")
        if self.cell < 1 or self.patch_side % self.cell:
            raise InvalidInputError(f"cell {self.cell} must divide patch_side {self.patch_side}")
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.model_size not in MODEL_SIZES:
            raise InvalidInputError(f"model_size must be one of {tuple(MODEL_SIZES)}, got {self.model_size!r}")
        if self.features not in FEATURES:
            raise InvalidInputError(f"features must be one of {FEATURES}, got {self.features!r}")
        if self.flow not in FLOW_BACKENDS:
            raise InvalidInputError(f"flow must be one of {FLOW_BACKENDS}, got {self.flow!r}")
        if self.aggregate_into not in ("update", "solve"):
            raise InvalidInputError("aggregate_into must be 'update' or 'solve'")
        if self.warmup < 1:
            raise InvalidInputError("warmup must be >= 1")
        if self.pnr_window < 1:
            raise InvalidInputError("pnr_window must be >= 1")
        if not 0 < self.min_scale <= 1 <= self.max_scale:
            raise InvalidInputError("need 0 < min_scale <= 1 <= max_scale")

    @property
    def flow_config(self):
        return FlowConfig(levels=self.flow_levels, iterations=self.flow_iterations,
                          smoothness=self.flow_smoothness, radius=self.patch_side / 4)

    @property
    def scale_exponents(self):
        half = (self.n_scales - 1) // 2
        return np.arange(-half, half + 1)


@dataclass
class Models:
    """Feature/attention parameters used by a tracker."""
    feature_net: object = None
    embedding: object = None
    gates: object = None


@dataclass
class BufferEntry:
    frame: int
    gray: np.ndarray  # patch pixels, grayscale (side, side)
    features: FeaturePatch  # unwindowed
    center: tuple
    crop: float
    flow: np.ndarray = None  # chained pixel flow onto the newest entry's grid


@dataclass
class TrackerState:
    cfg: TrackerConfig
    models: Models
    bank: object
    label: object
    buffer: deque
    box: BoundingBox
    base_size: tuple  # (w, h) at scale 1
    base_crop: float
    scale: float
    mean_peak: float = None
    mean_pnr: float = None
    n_accepted: int = 0
    frame_index: int = 0
    image_shape: tuple = None
    frozen: bool = False  # never update the bank (diagnostic switch)


@dataclass
class Diagnostics:
    frame: int
    peak: float
    pnr: float
    scale: float
    updated: bool
    gates: tuple = ()
    frame_weights: tuple = ()
    box: BoundingBox = None


def default_models(cfg, c_feat):
    models = Models()
    feature_spec, embed_spec, gate_widths = MODEL_SIZES[cfg.model_size]
    if cfg.features == "convnet":
        models.feature_net = init_convnet(feature_spec, 1, pool=cfg.cell, seed=cfg.seed)
        c_feat = models.feature_net.c_out
    models.embedding = init_embedding(c_feat, embed_spec, seed=cfg.seed + 1)
    models.gates = init_gates(cfg.T, gate_widths, seed=cfg.seed + 2)
    return models


def load_models(cfg, c_fixed=N_FIXED_CHANNELS):
    """Models from the bundle at ``cfg.params``, checked against the feature backend."""
    from .traineval.train import load_bundle
    models = load_bundle(cfg.params, cfg.T, pool=cfg.cell)
    if cfg.features == "convnet":
        if models.feature_net is None:
            raise InvalidInputError(f"{cfg.params}: features=convnet but the bundle has no feature net")
        c_feat = models.feature_net.c_out
    else:
        models.feature_net = None
        c_feat = c_fixed
    if models.embedding.c_in != c_feat:
        raise InvalidInputError(f"{cfg.params}: embedding expects {models.embedding.c_in} channels, "
                                f"the {cfg.features} features have {c_feat}")
    return models


def compute_features(cfg, models, patch):
    if cfg.features == "fixed":
        return fixed_features(patch, cfg.cell)
    gray = to_gray(patch.pixels)[:, :, None] - 0.5
    return convnet_forward(replace(patch, pixels=gray), models.feature_net)[0]


def _windowed(cfg, fp):
    """Window (optionally) and rescale to unit RMS.

    The linear response grows with feature energy, so without the rescale
    zoomed-in crops of a high-contrast target win the scale search.
    """
    fp = apply_window(fp) if cfg.window else fp
    rms = float(np.sqrt(np.mean(fp.map ** 2)))
    if cfg.normalize and rms > 1e-12:
        fp = FeaturePatch(fp.map / rms, fp.stride, fp.windowed)
    return fp


def pnr(r, window=5):
    """Peak-versus-noise ratio: (peak - mean(side)) / (std(side) + 1e-12).

    The side lobe is everything outside a window x window block centered on
    the peak (circularly); maps smaller than the block use all cells but the
    peak.
    """
    m = np.asarray(getattr(r, "map", r), dtype=np.float64)
    m = m[:, :, 0] if m.ndim == 3 else m
    if m.size == 0:
        raise InvalidInputError("empty response map")
    if m.max() == m.min():
        return 0.0  # flat map; the formula would only see rounding noise
    h, w = m.shape
    pr, pc = np.unravel_index(int(np.argmax(m)), m.shape)
    mask = np.ones_like(m, dtype=bool)
    if h >= window and w >= window:
        half = window // 2
        rows = (pr + np.arange(-half, half + 1)) % h
        cols = (pc + np.arange(-half, half + 1)) % w
        mask[np.ix_(rows, cols)] = False
    else:
        mask[pr, pc] = False
    side = m[mask]
    if side.size == 0:
        return 0.0
    return float((m[pr, pc] - side.mean()) / (side.std() + PNR_EPS))


def update_decision(state, peak, pnr_value):
    """Update iff peak and PNR both clear tau * running mean.

    Running means only absorb accepted frames. The first ``cfg.warmup``
    decisions accept any positive peak: the response on the frame right
    after init is far sharper than the steady state, and seeding the means
    from it alone would reject every later frame.
    """
    cfg = state.cfg
    if state.n_accepted < cfg.warmup:
        ok = peak > 0
    else:
        ok = peak >= cfg.tau_peak * state.mean_peak and pnr_value >= cfg.tau_pnr * state.mean_pnr
    if ok:
        n = state.n_accepted
        state.mean_peak = peak if n == 0 else (state.mean_peak * n + peak) / (n + 1)
        state.mean_pnr = pnr_value if n == 0 else (state.mean_pnr * n + pnr_value) / (n + 1)
        state.n_accepted = n + 1
    return bool(ok)


def scale_select(responses, penalty):
    """Pick (scale index, (row, col), penalized peak) over a scale stack.

    Ties go to the center scale, then the nearer scale (lower first), then
    the smallest row and column.
    """
    S = len(responses)
    if S < 1 or S % 2 == 0:
        raise InvalidInputError(f"need an odd number of scales, got {S}")
    c = S // 2
    order = sorted(range(S), key=lambda s: (abs(s - c), s))
    best = None
    for s in order:
        m = np.asarray(getattr(responses[s], "map", responses[s]), dtype=np.float64)
        m = m[:, :, 0] if m.ndim == 3 else m
        pm = penalty ** abs(s - c) * m
        idx = np.unravel_index(int(np.argmax(pm)), pm.shape)
        val = float(pm[idx])
        if best is None or val > best[2]:
            best = (s, (int(idx[0]), int(idx[1])), val)
    return best


def _label_for(cfg, box, crop):
    n = cfg.patch_side // cfg.cell
    cells_per_px = cfg.patch_side / crop / cfg.cell
    sigma = cfg.sigma_factor * np.sqrt(box.w * cells_per_px * box.h * cells_per_px)
    return gaussian_label(n, n, sigma)


def _crop(cfg, frame, center, crop):
    return extract_region(frame, center[0], center[1], crop, cfg.patch_side)


def init_tracker(frame, box, cfg=None, models=None):
    cfg = cfg or TrackerConfig()
    frame = _frame(frame)
    H, W = frame.shape[:2]
    cx, cy = box.center
    if not (0 <= cx < W and 0 <= cy < H):
        raise InvalidInputError(f"box center ({cx:.1f}, {cy:.1f}) outside the {W}x{H} frame")
    base_crop = crop_side(box, cfg.padding)
    patch = _crop(cfg, frame, (cx, cy), base_crop)
    if models is None:
        models = load_models(cfg) if cfg.params else default_models(cfg, N_FIXED_CHANNELS)
    feats = compute_features(cfg, models, patch)
    label = _label_for(cfg, box, base_crop)
    bank = solve_filters(_windowed(cfg, feats), label, cfg.lam)
    buf = deque(maxlen=cfg.T)
    buf.append(BufferEntry(0, to_gray(patch.pixels), feats, (cx, cy), base_crop))
    return TrackerState(cfg, models, bank, label, buf, box, (box.w, box.h), base_crop, 1.0,
                        image_shape=frame.shape)


def _frame(frame):
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 2:
        f = f[:, :, None]
    if f.ndim != 3 or f.shape[2] not in (1, 3):
        raise InvalidInputError(f"frame must be (H, W) or (H, W, 1|3), got {f.shape}")
    return f


def _wrap(d, n):
    return (d + n / 2.0) % n - n / 2.0


def _flow_between(state, src, ref):
    cfg = state.cfg
    n = cfg.patch_side // cfg.cell
    if cfg.flow == "disabled":
        return np.zeros((n, n, 2))
    if cfg.flow == "dir":
        f = _flow_from_dir(state, src, ref)
        if f is not None:
            return flow_to_grid(f, cfg.cell)
    if cfg.flow_chain and src.flow is not None:
        return flow_to_grid(src.flow, cfg.cell)
    f = estimate_flow(src.gray[:, :, None], ref.gray[:, :, None], cfg.flow_config)
    return flow_to_grid(f, cfg.cell)


def push_entry(state, entry):
    """Append to the ring buffer, chaining flows of older entries onto it.

    With chaining, one flow is estimated per frame (previous patch to the
    new one) and composed with each stored flow:
    f_k->new(p) = f_prev->new(p) + f_k->prev(p + f_prev->new(p)).
    """
    cfg = state.cfg
    if cfg.flow_chain and cfg.flow == "estimated" and cfg.variant != "no_flow" and state.buffer:
        prev = state.buffer[-1]
        step = estimate_flow(prev.gray[:, :, None], entry.gray[:, :, None], cfg.flow_config)
        for e in state.buffer:
            e.flow = step if e is prev or e.flow is None else step + warp_array(e.flow, step)
    state.buffer.append(entry)


def _flow_from_dir(state, src, ref):
    """Patch-grid flow from a precomputed full-frame field, if one exists.

    Files are named ``{i:06d}_{j:06d}.flo`` (1-based frame numbers) and hold
    flow on frame j's grid pointing into frame i.
    """
    cfg = state.cfg
    path = os.path.join(cfg.flow_dir, f"{src.frame + 1:06d}_{ref.frame + 1:06d}.flo")
    if not os.path.exists(path):
        return None
    full = read_flo(path)
    side = cfg.patch_side
    # image coordinates of the reference patch grid (pixel-center convention)
    step_r = ref.crop / side
    grid = (np.arange(side) + 0.5) * step_r - ref.crop / 2.0 - 0.5
    rows = ref.center[1] + grid[:, None] + 0 * grid[None, :]
    cols = ref.center[0] + grid[None, :] + 0 * grid[:, None]
    u = ndimage.map_coordinates(full[:, :, 0], [rows, cols], order=1, mode="nearest")
    v = ndimage.map_coordinates(full[:, :, 1], [rows, cols], order=1, mode="nearest")
    # map displaced image points into the source patch's index space
    step_s = src.crop / side
    src_r = (rows + v + 0.5 - src.center[1] + src.crop / 2.0) / step_s - 0.5
    src_c = (cols + u + 0.5 - src.center[0] + src.crop / 2.0) / step_s - 0.5
    idx = np.arange(side, dtype=np.float64)
    out = np.empty((side, side, 2))
    out[:, :, 0] = src_c - idx[None, :]
    out[:, :, 1] = src_r - idx[:, None]
    return out


def fuse_buffer(state):
    """Warp every buffered map onto the newest entry and fuse them.

    Returns (fused FeaturePatch, gates, per-frame mean weights).
    """
    cfg = state.cfg
    entries = list(state.buffer)
    ref = entries[-1]
    n = len(entries)
    warped = []
    for e in entries[:-1]:
        warped.append(warp(e.features, _flow_between(state, e, ref)))
    warped.append(ref.features)
    h, w = ref.features.map.shape[:2]
    ids = tuple(e.frame for e in entries)
    if cfg.variant == "decay":
        stack = decay_stack(h, w, n, cfg.update_rate)
        gates = np.ones(n)
        return aggregate(warped, stack), tuple(gates), tuple(stack.weights.mean(axis=(0, 1)))

    gate_params = None
    if cfg.variant == "full" and n == cfg.T:
        gate_params = state.models.gates
    fused, stack, cache = attention_forward(warped, ref.features, state.models.embedding,
                                            gate_params, cfg.renormalize, ids)
    if cfg.variant == "full" and n < cfg.T:
        gates = _short_gates(state, cache.stack)
        stack = apply_gates(cache.stack, gates, cfg.renormalize)
        fused = aggregate(warped, stack)
    else:
        gates = cache.gates
    pre = cache.stack.weights.mean(axis=(0, 1))
    return fused, tuple(float(g) for g in gates), tuple(float(v) for v in np.asarray(gates) * pre)


def _short_gates(state, stack):
    """Gates for a partly filled buffer: zero-pad the missing oldest frames."""
    T = state.cfg.T
    n = stack.T
    h, w = stack.weights.shape[:2]
    padded = np.concatenate([np.zeros((h, w, T - n)), stack.weights], axis=2)
    return temporal_gate(WeightStack(padded), state.models.gates)[T - n:]


def track_frame(state, frame):
    """Advance one frame; returns (state, box, Diagnostics). Mutates ``state``."""
    cfg = state.cfg
    frame = _frame(frame)
    if frame.shape != state.image_shape:
        raise InvalidInputError(f"frame shape {frame.shape} != initial {state.image_shape}")
    H, W = frame.shape[:2]
    state.frame_index += 1
    cx, cy = state.box.center

    responses, steps = [], []
    for e in cfg.scale_exponents:
        crop = state.base_crop * state.scale * cfg.scale_step ** e
        patch = _crop(cfg, frame, (cx, cy), crop)
        z = _windowed(cfg, compute_features(cfg, state.models, patch))
        responses.append(response(z, state.bank))
        steps.append(patch.scale_applied)
    s, _, _ = scale_select(responses, cfg.scale_penalty)
    r = responses[s]
    n = r.map.shape[0]
    pr, pc = r.peak_refined
    lr, lc = state.label.peak
    dy = _wrap(pr - lr, n) * cfg.cell * steps[s]
    dx = _wrap(pc - lc, n) * cfg.cell * steps[s]

    scale = float(np.clip(state.scale * cfg.scale_step ** cfg.scale_exponents[s],
                          cfg.min_scale, cfg.max_scale))
    ncx = float(np.clip(cx + dx, 0.0, W - 1e-6))
    ncy = float(np.clip(cy + dy, 0.0, H - 1e-6))
    bw, bh = state.base_size
    state.scale = scale
    state.box = BoundingBox.from_center(ncx, ncy, bw * scale, bh * scale)

    peak = r.peak_value
    pnr_value = pnr(r, cfg.pnr_window)
    decide = update_decision(state, peak, pnr_value) and not state.frozen

    crop = state.base_crop * scale
    patch = _crop(cfg, frame, (ncx, ncy), crop)
    feats = compute_features(cfg, state.models, patch)
    push_entry(state, BufferEntry(state.frame_index, to_gray(patch.pixels), feats, (ncx, ncy), crop))

    gates, weights = (), ()
    if decide:
        if cfg.variant == "no_flow":
            sample = feats
        else:
            sample, gates, weights = fuse_buffer(state)
        sample = _windowed(cfg, sample)
        if cfg.aggregate_into == "solve" and cfg.variant != "no_flow":
            state.bank = solve_filters(sample, state.label, cfg.lam)
        else:
            state.bank = update_filters(state.bank, sample, state.label, cfg.update_rate)
    diag = Diagnostics(state.frame_index, peak, pnr_value, scale, decide, gates, weights, state.box)
    return state, state.box, diag


def run_sequence(frames, init_box, cfg=None, models=None):
    """Track a whole sequence; returns (boxes, diagnostics)."""
    state = init_tracker(frames[0], init_box, cfg, models)
    boxes, diags = [init_box], []
    for f in frames[1:]:
        state, box, d = track_frame(state, f)
        boxes.append(box)
        diags.append(d)
    return boxes, diags
