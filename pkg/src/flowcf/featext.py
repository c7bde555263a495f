"""Patch cropping and feature extraction.

Two feature backends: a fixed hand-crafted extractor (cell-pooled grayscale
plus 8 soft-binned orientation channels) and a small trainable convnet with
an exact backward pass.
"""
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, InvalidInputError
from .ndkit import as_tensor3, hann2

LUMA = np.array([0.299, 0.587, 0.114])
N_ORIENT = 8


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidInputError(f"box size must be positive, got {self.w}x{self.h}")

    @property
    def center(self):
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    side: int
    scale_applied: float  # image pixels per patch pixel


@dataclass(frozen=True)
class FeaturePatch:
    map: np.ndarray
    stride: int
    windowed: bool = False

    @property
    def shape(self):
        return self.map.shape


def crop_side(box, padding):
    """Side of the square context region, rounded to the nearest even pixel."""
    raw = np.sqrt((box.w + padding * box.w) * (box.h + padding * box.h))
    return max(2.0, 2.0 * np.round(raw / 2.0))


def _bilinear_clamped(img, rows, cols):
    """Sample ``img`` (H, W, C) at fractional indices with edge replication."""
    H, W = img.shape[:2]
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    r1 = np.clip(r0 + 1, 0, H - 1)
    c1 = np.clip(c0 + 1, 0, W - 1)
    r0 = np.clip(r0, 0, H - 1)
    c0 = np.clip(c0, 0, W - 1)
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def extract_region(image, cx, cy, crop, side):
    """Resample the square region of edge ``crop`` centered at (cx, cy).

    Pixel i covers [i, i+1) in continuous coordinates, so its center sits at
    i + 0.5.
    """
    step = crop / side
    grid = (np.arange(side) + 0.5) * step - crop / 2.0 - 0.5
    rows, cols = np.meshgrid(cy + grid, cx + grid, indexing="ij")
    out = _bilinear_clamped(image, rows, cols)
    return Patch(np.clip(out, 0.0, 1.0), int(side), float(step))


def extract_patch(image, box, padding, side, scale=1.0):
    """Crop a padded square around ``box`` and resize it to side x side.

    ``scale`` multiplies the context edge (used by the scale pyramid).
    """
    image = as_tensor3(image, "image")
    if padding < 0:
        raise InvalidInputError(f"padding must be >= 0, got {padding}")
    if side < 1:
        raise InvalidInputError("side must be >= 1")
    H, W = image.shape[:2]
    cx, cy = box.center
    if not (0 <= cx < W and 0 <= cy < H):
        raise InvalidInputError(f"box center ({cx:.2f}, {cy:.2f}) outside {W}x{H} image")
    crop = crop_side(box, padding) * scale
    return extract_region(image, cx, cy, crop, side)


def to_gray(pixels):
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        return pixels
    if pixels.shape[2] == 1:
        return pixels[:, :, 0]
    if pixels.shape[2] == 3:
        return pixels @ LUMA
    raise InvalidInputError(f"expected 1 or 3 channels, got {pixels.shape[2]}")


def _gradients(gray):
    g = np.pad(gray, 1, mode="edge")
    gx = 0.5 * (g[1:-1, 2:] - g[1:-1, :-2])
    gy = 0.5 * (g[2:, 1:-1] - g[:-2, 1:-1])
    return gx, gy


def orientation_votes(gx, gy):
    """Soft-assign gradient magnitude to 8 unsigned orientation bins.

    Bin k is centered at (k + 0.5) * pi / 8; each pixel splits its magnitude
    linearly between the two nearest centers (circularly).
    """
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    pos = theta / (np.pi / N_ORIENT) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(int) % N_ORIENT
    hi = (lo + 1) % N_ORIENT
    votes = np.zeros(gx.shape + (N_ORIENT,))
    rr, cc = np.indices(gx.shape)
    # lo != hi always, so plain fancy assignment cannot collide
    votes[rr, cc, lo] = mag * (1 - frac)
    votes[rr, cc, hi] += mag * frac
    return votes


def fixed_features(p, cell):
    """Hand-crafted 9-channel features: mean-subtracted gray + 8 orientations.

    Every channel is averaged over non-overlapping cell x cell blocks.
    """
    side = p.pixels.shape[0]
    if cell < 1 or side % cell:
        raise InvalidInputError(f"cell {cell} does not divide patch side {side}")
    gray = to_gray(p.pixels)
    gx, gy = _gradients(gray)
    chans = np.concatenate([(gray - gray.mean())[:, :, None], orientation_votes(gx, gy)], axis=2)
    n = side // cell
    pooled = chans.reshape(n, cell, n, cell, chans.shape[2]).mean(axis=(1, 3))
    return FeaturePatch(pooled, cell, False)


def apply_window(fp):
    """Multiply every channel by a Hann window."""
    h, w = fp.map.shape[:2]
    return FeaturePatch(fp.map * hann2(h, w), fp.stride, True)


# --- trainable convnet -------------------------------------------------------

@dataclass
class ConvLayer:
    kernel: np.ndarray  # (k, k, c_in, c_out)
    bias: np.ndarray  # (c_out,)

    @property
    def k(self):
        return self.kernel.shape[0]

    @property
    def c_in(self):
        return self.kernel.shape[2]

    @property
    def c_out(self):
        return self.kernel.shape[3]


@dataclass
class ConvNetParams:
    """Conv stack: same-padded stride-1 layers, optional ReLU per layer, then
    average pooling by ``pool``.

    ``relu`` defaults to ReLU after every layer except the last.
    """
    layers: list
    pool: int = 1
    relu: tuple = None

    def __post_init__(self):
        if self.relu is None:
            self.relu = tuple(i < len(self.layers) - 1 for i in range(len(self.layers)))
        self.relu = tuple(bool(r) for r in self.relu)
        if len(self.relu) != len(self.layers):
            raise InvalidInputError("relu flags must match the layer count")
        for i, layer in enumerate(self.layers):
            kern = layer.kernel
            if kern.ndim != 4 or kern.shape[0] != kern.shape[1] or kern.shape[0] % 2 == 0:
                raise InvalidInputError(f"layer {i}: kernel must be (k, k, c_in, c_out) with odd k")
            if layer.bias.shape != (kern.shape[3],):
                raise InvalidInputError(f"layer {i}: bias shape {layer.bias.shape} != ({kern.shape[3]},)")
            if i and self.layers[i - 1].c_out != layer.c_in:
                raise InvalidInputError(f"layer {i}: expects {layer.c_in} channels, previous gives "
                                        f"{self.layers[i - 1].c_out}")
            if not (np.all(np.isfinite(kern)) and np.all(np.isfinite(layer.bias))):
                raise InvalidInputError(f"layer {i}: non-finite parameters")

    @property
    def c_in(self):
        return self.layers[0].c_in

    @property
    def c_out(self):
        return self.layers[-1].c_out

    def arrays(self):
        """Flat list of parameter arrays (kernel, bias, kernel, bias, ...)."""
        out = []
        for layer in self.layers:
            out += [layer.kernel, layer.bias]
        return out

    def copy(self):
        return ConvNetParams([ConvLayer(l.kernel.copy(), l.bias.copy()) for l in self.layers],
                             self.pool, self.relu)

    def zeros_like(self):
        return ConvNetParams([ConvLayer(np.zeros_like(l.kernel), np.zeros_like(l.bias))
                              for l in self.layers], self.pool, self.relu)


def init_convnet(spec, c_in, pool=1, seed=0, relu=None):
    """He-initialized conv stack; ``spec`` is a list of (k, c_out) pairs."""
    rng = np.random.default_rng(seed)
    layers = []
    c = c_in
    for k, c_out in spec:
        std = np.sqrt(2.0 / (k * k * c))
        layers.append(ConvLayer(rng.normal(0.0, std, (k, k, c, c_out)), np.zeros(c_out)))
        c = c_out
    return ConvNetParams(layers, pool, relu)


DESK_FEATURE_SPEC = [(3, 16), (3, 8)]
WIDE_FEATURE_SPEC = [(3, 128), (3, 128), (3, 96)]


def conv2d_same(x, kernel, bias):
    k = kernel.shape[0]
    r = k // 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))  # (H, W, c_in, k, k)
    return np.einsum("hwcij,ijco->hwo", win, kernel, optimize=True) + bias


def _conv2d_same_backward(g, x, kernel):
    k = kernel.shape[0]
    r = k // 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))
    g_kernel = np.einsum("hwcij,hwo->ijco", win, g, optimize=True)
    g_bias = g.sum(axis=(0, 1))
    # input gradient: correlate the padded output gradient with the flipped kernel
    gp = np.pad(g, ((r, r), (r, r), (0, 0)))
    gwin = sliding_window_view(gp, (k, k), axis=(0, 1))  # (H, W, c_out, k, k)
    g_x = np.einsum("hwoij,ijco->hwc", gwin, kernel[::-1, ::-1], optimize=True)
    return g_x, g_kernel, g_bias


def avg_pool(x, s):
    if s == 1:
        return x
    h, w, c = x.shape
    return x.reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))


def _avg_pool_backward(g, s):
    if s == 1:
        return g
    return np.repeat(np.repeat(g, s, axis=0), s, axis=1) / (s * s)


@dataclass
class ConvCache:
    inputs: list = field(default_factory=list)  # input to each layer
    preacts: list = field(default_factory=list)
    params: ConvNetParams = None
    in_shape: tuple = None
    out_shape: tuple = None


def convnet_apply(x, params):
    """Run the conv stack on a raw (h, w, c) array; returns (array, cache)."""
    x = as_tensor3(x, "convnet input")
    if x.shape[2] != params.c_in:
        raise InvalidInputError(f"convnet expects {params.c_in} input channels, got {x.shape[2]}")
    s = params.pool
    if x.shape[0] % s or x.shape[1] % s:
        raise InvalidInputError(f"pool stride {s} does not divide input {x.shape[:2]}")
    cache = ConvCache(params=params, in_shape=x.shape)
    a = x
    for layer, relu in zip(params.layers, params.relu):
        cache.inputs.append(a)
        z = conv2d_same(a, layer.kernel, layer.bias)
        cache.preacts.append(z)
        a = np.maximum(z, 0.0) if relu else z
    out = avg_pool(a, s)
    cache.out_shape = out.shape
    return out, cache


def convnet_apply_backward(grad_out, cache):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.ndim == 2:
        grad_out = grad_out[:, :, None]
    if grad_out.shape != cache.out_shape:
        raise InvalidInputError(f"grad shape {grad_out.shape} != forward output {cache.out_shape}")
    params = cache.params
    g = _avg_pool_backward(grad_out, params.pool)
    grads = []
    for i in reversed(range(len(params.layers))):
        if params.relu[i]:
            g = g * (cache.preacts[i] > 0)
        g, gk, gb = _conv2d_same_backward(g, cache.inputs[i], params.layers[i].kernel)
        grads.append(ConvLayer(gk, gb))
    return g, ConvNetParams(grads[::-1], params.pool, params.relu)


def convnet_forward(p, params):
    """Features of a patch through the conv stack: (FeaturePatch, cache)."""
    out, cache = convnet_apply(p.pixels, params)
    return FeaturePatch(out, params.pool, False), cache


def convnet_backward(grad_out, cache):
    """Exact gradients w.r.t. the patch pixels and every parameter."""
    return convnet_apply_backward(grad_out, cache)


def kink_margin(cache):
    """Smallest |pre-activation| feeding a ReLU (inf if there are none)."""
    vals = [np.abs(z).min() for z, r in zip(cache.preacts, cache.params.relu) if r]
    return min(vals) if vals else np.inf


# --- parameter file ----------------------------------------------------------

MAGIC = b"FCF1"


def write_layers(layers, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for layer in layers:
            k, k2, ci, co = layer.kernel.shape
            fh.write(struct.pack("<4I", k, k2, ci, co))
            fh.write(np.ascontiguousarray(layer.kernel, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())


def read_layers(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}", 0)
    pos = 4
    layers = []
    while pos < len(data):
        if pos + 16 > len(data):
            raise FormatError(f"{path}: truncated layer header", pos)
        k, k2, ci, co = struct.unpack_from("<4I", data, pos)
        pos += 16
        n_k = k * k2 * ci * co
        need = 4 * (n_k + co)
        if pos + need > len(data):
            raise FormatError(f"{path}: truncated layer data", pos)
        kern = np.frombuffer(data, "<f4", n_k, pos).reshape(k, k2, ci, co).astype(np.float64)
        pos += 4 * n_k
        bias = np.frombuffer(data, "<f4", co, pos).astype(np.float64)
        pos += 4 * co
        layers.append(ConvLayer(kern, bias))
    return layers


def save_params(params, path):
    write_layers(params.layers, path)


def load_params(path, pool=4, relu=None):
    return ConvNetParams(read_layers(path), pool, relu)


def with_pool(params, pool):
    return replace(params, pool=pool)
