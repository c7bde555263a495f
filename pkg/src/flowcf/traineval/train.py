"""Toy Siamese training of the feature net, embedding and gates.

One training sample is a window of T historical patches plus the current
patch, all cropped around the target box of the last historical frame.
Historical features are warped onto that frame by fixed (non-trainable)
flow, fused by attention into the template x, and the filter solved on x
must reproduce a Gaussian centered on the true target offset when applied
to the current patch z. Weight decay plays the role of the parameter norm
term in the loss.
"""
from dataclasses import dataclass, field

import numpy as np

from ..attention import MODEL_SIZES, GateParams, attention_backward, \
    attention_forward, init_embedding, init_gates
from ..cflayer import cf_backward, cf_forward_loss, gaussian_label
from ..errors import FormatError, InvalidInputError, TrainingDivergedError
from ..featext import ConvLayer, ConvNetParams, convnet_apply, \
    convnet_apply_backward, crop_side, extract_region, init_convnet, read_layers, to_gray, \
    write_layers
from ..flowwarp import FlowConfig, estimate_flow, flow_to_grid, warp, warp_backward
from ..ndkit import hann2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    steps_per_epoch: int = 20
    lr: float = 1e-5
    lr_multiplier: float = 100.0  # toy nets need a much larger step than lr alone
    momentum: float = 0.9
    weight_decay: float = 0.005
    batch: int = 1
    T: int = 6
    seed: int = 0
    patch_side: int = 48
    cell: int = 4
    padding: float = 1.56
    lam: float = 1e-4
    sigma_factor: float = 0.1
    window: bool = True
    jitter: float = 2.0  # max px offset of the current-branch crop, uniform per axis
    photometric: float = 0.1  # current-branch gain in [1-p, 1+p] and offset in [-p/2, p/2]
    model_size: str = "desk"  # or "wide"
    fixed_batch: bool = False  # reuse one batch for every step (overfit runs)
    flow_levels: int = 2
    flow_iterations: int = 2

    def __post_init__(self):
        if self.lr < 0 or self.lr_multiplier < 0:
            raise InvalidInputError("lr and lr_multiplier must be >= 0")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be >= 0")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch < 1:
            raise InvalidInputError("epochs, steps_per_epoch and batch must be >= 1")
        if self.T < 1:
            raise InvalidInputError("T must be >= 1")
        if self.jitter < 0:
            raise InvalidInputError("jitter must be >= 0")
        if not 0 <= self.photometric < 1:
            raise InvalidInputError("photometric must be in [0, 1)")
        if self.cell < 1 or self.patch_side % self.cell:
            raise InvalidInputError(f"cell {self.cell} must divide patch_side {self.patch_side}")
        if self.model_size not in MODEL_SIZES:
            raise InvalidInputError(f"model_size must be one of {tuple(MODEL_SIZES)}")

    @property
    def step_size(self):
        return self.lr * self.lr_multiplier

    @property
    def flow_config(self):
        return FlowConfig(levels=self.flow_levels, iterations=self.flow_iterations,
                          radius=self.patch_side / 4)


@dataclass
class TrainModels:
    feature_net: ConvNetParams
    embedding: ConvNetParams
    gates: GateParams

    def arrays(self):
        return self.feature_net.arrays() + self.embedding.arrays() + self.gates.arrays()

    def copy(self):
        return TrainModels(self.feature_net.copy(), self.embedding.copy(), self.gates.copy())


def init_models(tcfg, feature_spec=None, embed_spec=None, gate_widths=None, c_in=1):
    """Seeded models; specs left as None come from ``tcfg.model_size``."""
    sizes = MODEL_SIZES[tcfg.model_size]
    feature_spec = feature_spec or sizes[0]
    embed_spec = embed_spec or sizes[1]
    gate_widths = gate_widths or sizes[2]
    feat = init_convnet(feature_spec, c_in, pool=tcfg.cell, seed=tcfg.seed)
    emb = init_embedding(feat.c_out, embed_spec, seed=tcfg.seed + 1)
    gates = init_gates(tcfg.T, gate_widths, seed=tcfg.seed + 2)
    return TrainModels(feat, emb, gates)


@dataclass
class Sample:
    history: list  # T gray patches (side, side, 1), oldest first
    current: np.ndarray
    flows: list  # grid flows from each historical patch onto the last one
    desired_center: tuple  # (row, col) in cells
    box_cells: float  # geometric-mean target size in cells, sets the label width


@dataclass
class TrainResult:
    models: TrainModels
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def _gray_patch(frame, center, crop, side):
    p = extract_region(np.asarray(frame, dtype=np.float64), center[0], center[1], crop, side)
    return to_gray(p.pixels)[:, :, None] - 0.5


def make_sample(frames, boxes, t, tcfg, rng=None, with_flow=True):
    """Window t-T..t-1 (history, cropped at box t-1) and frame t (current).

    When ``rng`` is given, the current crop is offset from box t-1 by up to
    ``tcfg.jitter`` px per axis (on top of the true motion between frames)
    and gets a random gain and offset of size ``tcfg.photometric``.
    """
    if not tcfg.T <= t < len(frames):
        raise InvalidInputError(f"t={t} needs {tcfg.T} earlier frames in a {len(frames)}-frame sequence")
    anchor = boxes[t - 1]
    center = anchor.center
    crop = crop_side(anchor, tcfg.padding)
    side = tcfg.patch_side
    hist = [_gray_patch(frames[i], center, crop, side) for i in range(t - tcfg.T, t)]
    jx, jy = rng.uniform(-tcfg.jitter, tcfg.jitter, 2) if rng is not None else (0.0, 0.0)
    cur_center = (center[0] + jx, center[1] + jy)
    cur = _gray_patch(frames[t], cur_center, crop, side)
    if rng is not None and tcfg.photometric:
        p = tcfg.photometric
        cur = cur * rng.uniform(1 - p, 1 + p) + rng.uniform(-p / 2, p / 2)
    n = side // tcfg.cell
    grid = np.zeros((n, n, 2))
    flows = []
    for h in hist[:-1]:
        if with_flow:
            flows.append(flow_to_grid(estimate_flow(h + 0.5, hist[-1] + 0.5, tcfg.flow_config), tcfg.cell))
        else:
            flows.append(grid.copy())
    flows.append(grid.copy())
    cells_per_px = side / crop / tcfg.cell
    dx = (boxes[t].center[0] - cur_center[0]) * cells_per_px
    dy = (boxes[t].center[1] - cur_center[1]) * cells_per_px
    box_cells = float(np.sqrt(anchor.w * anchor.h)) * cells_per_px
    return Sample(hist, cur, flows, (n // 2 + dy, n // 2 + dx), box_cells)


def _labels(tcfg, sample, n):
    sigma = tcfg.sigma_factor * sample.box_cells
    return gaussian_label(n, n, sigma), gaussian_label(n, n, sigma, sample.desired_center)


def sample_loss(models, sample, tcfg, grads=True):
    """Loss of one sample and, optionally, gradients for every parameter.

    Returns (loss, TrainModels of gradients or None).
    """
    feats, caches = [], []
    for h in sample.history:
        f, c = convnet_apply(h, models.feature_net)
        feats.append(f)
        caches.append(c)
    zf, zc = convnet_apply(sample.current, models.feature_net)
    warped = [warp(f, fl) for f, fl in zip(feats, sample.flows)]
    fused, _, acache = attention_forward(warped, feats[-1], models.embedding, models.gates)
    n = fused.shape[0]
    win = hann2(n, n) if tcfg.window else np.ones((n, n, 1))
    y, desired = _labels(tcfg, sample, n)
    loss, cf_cache = cf_forward_loss(fused * win, zf * win, y, desired, tcfg.lam)
    if not grads:
        return loss, None

    gx, gz = cf_backward(cf_cache)
    gx, gz = gx * win, gz * win
    ag = attention_backward(gx, acache, models.embedding, models.gates)
    g_hist = []
    for i, (f, fl) in enumerate(zip(feats, sample.flows)):
        g_hist.append(warp_backward(ag.warped[i], f, fl)[0])
    g_hist[-1] = g_hist[-1] + ag.ref
    g_feat = None
    for g, c in zip(g_hist + [gz], caches + [zc]):
        _, gp = convnet_apply_backward(g, c)
        g_feat = gp if g_feat is None else _add(g_feat, gp)
    return loss, TrainModels(g_feat, ag.embedding, ag.gates)


def _add(a, b):
    out = a.copy()
    for la, lb in zip(out.layers, b.layers):
        la.kernel += lb.kernel
        la.bias += lb.bias
    return out


def batch_loss(models, batch, tcfg, grads=True):
    total, acc = 0.0, None
    for s in batch:
        loss, g = sample_loss(models, s, tcfg, grads)
        total += loss
        if grads:
            acc = g if acc is None else _sum_models(acc, g)
    k = len(batch)
    if grads:
        for a in acc.arrays():
            a /= k
    return total / k, acc


def _sum_models(a, b):
    out = a.copy()
    for x, y in zip(out.arrays(), b.arrays()):
        x += y
    return out


def _draw_batch(rng, sequences, tcfg):
    batch = []
    for _ in range(tcfg.batch):
        k = int(rng.integers(len(sequences)))
        frames, boxes = sequences[k]
        t = int(rng.integers(tcfg.T, len(frames)))
        batch.append(make_sample(frames, boxes, t, tcfg, rng))
    return batch


def train(sequences, tcfg=None, models=None, progress=None):
    """SGD with momentum and weight decay on all trainable parameters.

    ``sequences`` is a list of (frames, boxes) pairs. ``progress`` is called
    as progress(epoch, mean_loss) after every epoch.
    """
    tcfg = tcfg or TrainConfig()
    if not sequences:
        raise InvalidInputError("no training sequences")
    for frames, boxes in sequences:
        if len(frames) <= tcfg.T or len(frames) != len(boxes):
            raise InvalidInputError(f"each sequence needs more than T={tcfg.T} frames and one box per frame")
    models = models.copy() if models is not None else init_models(tcfg)
    rng = np.random.default_rng(tcfg.seed)
    params = models.arrays()
    velocity = [np.zeros_like(p) for p in params]
    lr = tcfg.step_size
    result = TrainResult(models)
    fixed = _draw_batch(rng, sequences, tcfg) if tcfg.fixed_batch else None
    step = 0
    for epoch in range(tcfg.epochs):
        losses = []
        for _ in range(tcfg.steps_per_epoch):
            batch = fixed or _draw_batch(rng, sequences, tcfg)
            try:
                loss, grads = batch_loss(models, batch, tcfg)
            except InvalidInputError:
                # non-finite parameters surface as non-finite features downstream
                if all(np.all(np.isfinite(p)) for p in params):
                    raise
                raise TrainingDivergedError(step, float("nan")) from None
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.arrays()):
                raise TrainingDivergedError(step, loss)
            for p, v, g in zip(params, velocity, grads.arrays()):
                v *= tcfg.momentum
                v += g + tcfg.weight_decay * p
                p -= lr * v
            losses.append(loss)
            result.step_losses.append(loss)
            step += 1
        result.epoch_losses.append(float(np.mean(losses)))
        if progress is not None:
            progress(epoch, result.epoch_losses[-1])
    return result


# --- parameter bundles -----------------------------------------------------------
# One FCF1 file: feature-net layers, then the three embedding layers, then the
# three gate layers stored as 1x1 convolutions (kernel[0, 0] = W transposed).

N_EMBED_LAYERS = 3
N_GATE_LAYERS = 3


def save_bundle(models, path):
    gates = models.gates
    gate_layers = [ConvLayer(w.T[None, None].copy(), b.copy())
                   for w, b in ((gates.w1, gates.b1), (gates.w2, gates.b2), (gates.w3, gates.b3))]
    feat_layers = models.feature_net.layers if models.feature_net is not None else []
    write_layers(list(feat_layers) + list(models.embedding.layers) + gate_layers, path)


def load_bundle(path, T, pool=4):
    """Read a bundle into tracker Models; the feature net is absent when the file
    holds only the embedding and gate layers."""
    from ..attention import EMBED_RELU
    from ..tracker import Models
    layers = read_layers(path)
    if len(layers) < N_EMBED_LAYERS + N_GATE_LAYERS:
        raise FormatError(f"{path}: bundle needs at least {N_EMBED_LAYERS + N_GATE_LAYERS} layers, "
                          f"found {len(layers)}", None)
    gl = layers[-N_GATE_LAYERS:]
    el = layers[-(N_GATE_LAYERS + N_EMBED_LAYERS):-N_GATE_LAYERS]
    fl = layers[:-(N_GATE_LAYERS + N_EMBED_LAYERS)]
    if any(g.k != 1 for g in gl):
        raise FormatError(f"{path}: gate layers must be 1x1", None)
    if gl[0].c_in != T:
        raise FormatError(f"{path}: gates were trained for T={gl[0].c_in}, config has T={T}", None)
    try:
        gates = GateParams(*[a for g in gl for a in (g.kernel[0, 0].T.copy(), g.bias)])
        emb = ConvNetParams(el, 1, EMBED_RELU)
        feat = ConvNetParams(fl, pool) if fl else None
    except InvalidInputError as exc:
        raise FormatError(f"{path}: {exc}", None) from None
    return Models(feat, emb, gates)


def to_tracker_models(models):
    from ..tracker import Models
    return Models(models.feature_net, models.embedding, models.gates)
