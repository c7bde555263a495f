"""Optical flow estimation, flow-guided bilinear warping and .flo file I/O.

Flow fields are (h, w, 2) arrays defined on the reference grid: channel 0 is
the column displacement u, channel 1 the row displacement v. Warping samples
the source at p + (v, u), so ``warp(a, estimate_flow(a, b))`` approximates b.
"""
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidInputError
from .featext import FeaturePatch
from .ndkit import as_tensor3

FLO_MAGIC = 202021.25


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 3
    iterations: int = 4
    smoothness: float = 0.5  # blend weight toward the Gaussian-smoothed field
    radius: float = 16.0  # pixels at full resolution
    window_sigma: float = 2.0  # local least-squares window
    reg: float = 1e-3  # Tikhonov weight, relative to mean structure-tensor trace

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 1:
            raise InvalidInputError("flow config needs levels >= 1 and iterations >= 1")
        if not 0 <= self.smoothness < 1:
            raise InvalidInputError("smoothness must be in [0, 1)")
        if self.radius <= 0 or self.window_sigma <= 0 or self.reg < 0:
            raise InvalidInputError("radius and window_sigma must be positive, reg >= 0")


def _as_flow(flow, shape=None):
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2:
        raise InvalidInputError(f"flow must be (h, w, 2), got {f.shape}")
    if shape is not None and f.shape[:2] != tuple(shape):
        raise InvalidInputError(f"flow grid {f.shape[:2]} does not match features {tuple(shape)}")
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("flow contains non-finite values")
    return f


def _sample_coords(h, w, flow):
    rows, cols = np.indices((h, w), dtype=np.float64)
    return rows + flow[:, :, 1], cols + flow[:, :, 0]


def _axis_terms(pos, n):
    """Clamped sample position split into a base index and fraction.

    The base index is floor(pos), so at integer positions the kernel
    derivative is the right-hand one. ``inside`` marks positions in
    [0, n-1], where the derivative is not cut by clamping.
    """
    inside = (pos >= 0) & (pos <= n - 1)
    p = np.clip(pos, 0, n - 1)
    i0 = np.minimum(np.floor(p).astype(int), max(n - 2, 0))
    frac = p - i0
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, frac, inside


def _sampler(h, w, flow):
    rows, cols = _sample_coords(h, w, flow)
    return _axis_terms(rows, h), _axis_terms(cols, w)


def warp_array(phi, flow):
    h, w = phi.shape[:2]
    (r0, r1, fr, _), (c0, c1, fc, _) = _sampler(h, w, flow)
    fr, fc = fr[..., None], fc[..., None]
    return ((1 - fr) * ((1 - fc) * phi[r0, c0] + fc * phi[r0, c1])
            + fr * ((1 - fc) * phi[r1, c0] + fc * phi[r1, c1]))


def warp(phi_i, flow):
    """Bilinearly sample ``phi_i`` at p + flow(p), clamping to the border."""
    phi = as_tensor3(getattr(phi_i, "map", phi_i), "features")
    f = _as_flow(flow, phi.shape[:2])
    out = warp_array(phi, f)
    if isinstance(phi_i, FeaturePatch):
        return FeaturePatch(out, phi_i.stride, phi_i.windowed)
    return out


def warp_backward(grad_out, phi_i, flow):
    """Adjoint of :func:`warp` w.r.t. the features, and its flow derivative.

    Returns (grad_phi, grad_flow) with grad_flow[..., 0] for u and
    grad_flow[..., 1] for v.
    """
    phi = as_tensor3(getattr(phi_i, "map", phi_i), "features")
    f = _as_flow(flow, phi.shape[:2])
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != phi.shape:
        raise InvalidInputError(f"grad shape {g.shape} != feature shape {phi.shape}")
    h, w, c = phi.shape
    (r0, r1, fr, in_r), (c0, c1, fc, in_c) = _sampler(h, w, f)
    fr3, fc3 = fr[..., None], fc[..., None]

    grad_phi = np.zeros_like(phi)
    for rr, cc, wt in ((r0, c0, (1 - fr3) * (1 - fc3)), (r0, c1, (1 - fr3) * fc3),
                       (r1, c0, fr3 * (1 - fc3)), (r1, c1, fr3 * fc3)):
        np.add.at(grad_phi, (rr, cc), wt * g)

    p00, p01, p10, p11 = phi[r0, c0], phi[r0, c1], phi[r1, c0], phi[r1, c1]
    d_col = (1 - fr3) * (p01 - p00) + fr3 * (p11 - p10)
    d_row = (1 - fc3) * (p10 - p00) + fc3 * (p11 - p01)
    grad_flow = np.empty((h, w, 2))
    grad_flow[:, :, 0] = np.sum(g * d_col, axis=2) * in_c
    grad_flow[:, :, 1] = np.sum(g * d_row, axis=2) * in_r
    return grad_phi, grad_flow


# --- estimation ----------------------------------------------------------------

def _gray2d(img, name):
    t = as_tensor3(img, name)
    if t.shape[2] != 1:
        raise InvalidInputError(f"{name}: flow estimation needs single-channel input")
    return t[:, :, 0]


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        prev = pyr[-1]
        if min(prev.shape) < 16:
            break
        pyr.append(ndimage.gaussian_filter(prev, 1.0, mode="nearest")[::2, ::2])
    return pyr


def _resize_flow(flow, shape):
    h, w = flow.shape[:2]
    H, W = shape
    rows = (np.arange(H) + 0.5) * (h / H) - 0.5
    cols = (np.arange(W) + 0.5) * (w / W) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = np.empty((H, W, 2))
    for k, s in enumerate((W / w, H / h)):
        out[:, :, k] = s * ndimage.map_coordinates(flow[:, :, k], [rr, cc], order=1, mode="nearest")
    return out


def _sample2d(img, flow):
    return warp_array(img[:, :, None], flow)[:, :, 0]


def estimate_flow(img_a, img_b, cfg=None):
    """Coarse-to-fine dense local least-squares flow with smoothing.

    Finds flow on img_b's grid with img_b(p) ~ img_a(p + flow(p)).
    """
    cfg = cfg or FlowConfig()
    a, b = _gray2d(img_a, "img_a"), _gray2d(img_b, "img_b")
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    pa, pb = _pyramid(a, cfg.levels), _pyramid(b, cfg.levels)
    sig = cfg.window_sigma
    flow = None
    for lvl in reversed(range(len(pa))):
        A, B = pa[lvl], pb[lvl]
        if flow is None:
            flow = np.zeros(A.shape + (2,))
        else:
            flow = _resize_flow(flow, A.shape)
        radius = cfg.radius / 2 ** lvl
        ay, ax = np.gradient(A)
        by, bx = np.gradient(B)
        for _ in range(cfg.iterations):
            aw = _sample2d(A, flow)
            gx = 0.5 * (_sample2d(ax, flow) + bx)
            gy = 0.5 * (_sample2d(ay, flow) + by)
            e = B - aw
            j11 = ndimage.gaussian_filter(gx * gx, sig, mode="nearest")
            j12 = ndimage.gaussian_filter(gx * gy, sig, mode="nearest")
            j22 = ndimage.gaussian_filter(gy * gy, sig, mode="nearest")
            b1 = ndimage.gaussian_filter(gx * e, sig, mode="nearest")
            b2 = ndimage.gaussian_filter(gy * e, sig, mode="nearest")
            eps = cfg.reg * np.mean(j11 + j22) + 1e-12
            j11, j22 = j11 + eps, j22 + eps
            det = j11 * j22 - j12 * j12
            flow[:, :, 0] += (j22 * b1 - j12 * b2) / det
            flow[:, :, 1] += (j11 * b2 - j12 * b1) / det
            np.clip(flow, -radius, radius, out=flow)
            if cfg.smoothness > 0:
                smooth = ndimage.gaussian_filter(flow, (1.0, 1.0, 0), mode="nearest")
                flow = (1 - cfg.smoothness) * flow + cfg.smoothness * smooth
    return flow


def flow_to_grid(flow, stride):
    """Area-mean downsample a pixel flow to a feature grid, in cell units."""
    f = _as_flow(flow)
    h, w = f.shape[:2]
    if h % stride or w % stride:
        raise InvalidInputError(f"stride {stride} does not divide flow grid {h}x{w}")
    return f.reshape(h // stride, stride, w // stride, stride, 2).mean(axis=(1, 3)) / stride


# --- .flo files ------------------------------------------------------------------

def write_flo(field, path):
    f = _as_flow(field)
    h, w = f.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())


def read_flo(path):
    """Read a Middlebury .flo file into an (h, w, 2) float64 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated magic", len(data))
    (magic,) = struct.unpack_from("<f", data, 0)
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header", len(data))
    w, h = struct.unpack_from("<ii", data, 4)
    if w < 1 or h < 1:
        raise FormatError(f"{path}: invalid size {w}x{h}", 4)
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FormatError(f"{path}: truncated data, expected {need} bytes, got {len(data)}", len(data))
    if len(data) > need:
        raise FormatError(f"{path}: {len(data) - need} trailing bytes", need)
    vals = np.frombuffer(data, "<f4", 2 * w * h, 12)
    return vals.reshape(h, w, 2).astype(np.float64)
