"""Synthetic tracking sequences with exact ground truth."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import InvalidInputError
from ..featext import BoundingBox

MOTIONS = ("static", "translate", "sinusoid")


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 60
    height: int = 200
    width: int = 200
    target_w: int = 32
    target_h: int = 32
    start_x: float = -1.0  # negative: center the target
    start_y: float = -1.0
    motion: str = "static"
    dx: float = 0.0
    dy: float = 0.0
    amplitude: float = 20.0  # sinusoid amplitude in pixels (x, and y at half)
    period: float = 40.0
    deformation: float = 0.0  # px of non-rigid texture wobble
    illumination: float = 0.0  # fractional gain drift over the sequence
    noise: float = 0.0  # per-pixel Gaussian noise std
    occlusions: tuple = ()  # ((start, end), ...) frame intervals, end exclusive
    coverage: float = 0.5
    occluder_static: bool = False  # occluder fixed in the image instead of riding on the target
    seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise InvalidInputError("frames must be >= 2")
        if not 0 <= self.coverage <= 1:
            raise InvalidInputError(f"coverage must be in [0, 1], got {self.coverage}")
        if self.motion not in MOTIONS:
            raise InvalidInputError(f"motion must be one of {MOTIONS}")
        if self.target_w < 1 or self.target_h < 1:
            raise InvalidInputError("target size must be positive")
        if self.target_w > self.width or self.target_h > self.height:
            raise InvalidInputError("target larger than image")
        for iv in self.occlusions:
            if len(iv) != 2 or iv[0] > iv[1]:
                raise InvalidInputError(f"bad occlusion interval {iv!r}")


def _texture(rng, h, w, sigma, lo=0.0, hi=1.0):
    t = ndimage.gaussian_filter(rng.random((h, w)), sigma, mode="wrap")
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    return lo + (hi - lo) * t


def _sample(tex, rows, cols):
    return ndimage.map_coordinates(tex, [rows, cols], order=1, mode="nearest")


def trajectory(cfg):
    """Top-left corners for every frame."""
    x0 = (cfg.width - cfg.target_w) / 2.0 if cfg.start_x < 0 else cfg.start_x
    y0 = (cfg.height - cfg.target_h) / 2.0 if cfg.start_y < 0 else cfg.start_y
    t = np.arange(cfg.frames, dtype=np.float64)
    if cfg.motion == "static":
        xs, ys = np.full_like(t, x0), np.full_like(t, y0)
    elif cfg.motion == "translate":
        xs, ys = x0 + cfg.dx * t, y0 + cfg.dy * t
    else:
        ph = 2 * np.pi * t / cfg.period
        xs = x0 + cfg.amplitude * np.sin(ph)
        ys = y0 + 0.5 * cfg.amplitude * np.sin(2 * ph)
    xs = np.clip(xs, 0, cfg.width - cfg.target_w)
    ys = np.clip(ys, 0, cfg.height - cfg.target_h)
    return xs, ys


def _occluded(cfg, k):
    return any(a <= k < b for a, b in cfg.occlusions)


class _Scene:
    def __init__(self, cfg):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.background = _texture(rng, cfg.height, cfg.width, 3.0, 0.2, 0.8)
        self.target = _texture(rng, cfg.target_h, cfg.target_w, 1.5, 0.0, 1.0)
        self.occluder = _texture(rng, cfg.height, cfg.width, 2.0, 0.1, 0.9)
        self.wobble_phase = rng.uniform(0, 2 * np.pi, 2)
        self.xs, self.ys = trajectory(cfg)

    def render(self, k, occlude=True):
        cfg = self.cfg
        img = self.background.copy()
        x, y = self.xs[k], self.ys[k]
        rows, cols = np.indices(img.shape, dtype=np.float64)
        lr = rows + 0.5 - y
        lc = cols + 0.5 - x
        inside = (lr >= 0) & (lr < cfg.target_h) & (lc >= 0) & (lc < cfg.target_w)
        tr, tc = lr[inside] - 0.5, lc[inside] - 0.5
        if cfg.deformation:
            ph = 2 * np.pi * k / 25.0
            tr = tr + cfg.deformation * np.sin(2 * np.pi * tc / cfg.target_w + ph + self.wobble_phase[0])
            tc = tc + cfg.deformation * np.sin(2 * np.pi * tr / cfg.target_h + ph + self.wobble_phase[1])
        img[inside] = _sample(self.target, tr, tc)
        if occlude and _occluded(cfg, k) and cfg.coverage > 0:
            ow = cfg.coverage * cfg.target_w
            if cfg.occluder_static:
                # parked where the target was when the interval started; fixed in the image
                a, _ = next(iv for iv in cfg.occlusions if iv[0] <= k < iv[1])
                ox, oy = self.xs[a], self.ys[a]
                occ = ((rows + 0.5 >= oy) & (rows + 0.5 < oy + cfg.target_h)
                       & (cols + 0.5 >= ox) & (cols + 0.5 < ox + ow))
                img[occ] = self.occluder[occ]
            else:
                # rides on the target's left side, textured in its own frame
                occ = inside & (lc < ow)
                img[occ] = _sample(self.occluder, lr[occ] - 0.5, lc[occ] - 0.5)
        gain = 1.0 + cfg.illumination * k / max(cfg.frames - 1, 1)
        img = img * gain
        if cfg.noise:
            nrng = np.random.default_rng([cfg.seed, k])
            img = img + nrng.normal(0.0, cfg.noise, img.shape)
        return np.clip(img, 0.0, 1.0)[:, :, None]


def synth_sequence(cfg, occlude=True):
    """Render frames and exact ground-truth boxes; deterministic per seed."""
    scene = _Scene(cfg)
    frames = [scene.render(k, occlude) for k in range(cfg.frames)]
    gt = [BoundingBox(float(x), float(y), float(cfg.target_w), float(cfg.target_h))
          for x, y in zip(scene.xs, scene.ys)]
    return frames, gt


def occlusion_suite_config(seed):
    """One member of the synthetic occlusion suite used for ablations.

    Sinusoidal motion with texture wobble, noise and an illumination ramp;
    one partial occlusion (30-50% of the target width) lasting 10-16 frames.
    """
    rng = np.random.default_rng(1000 + seed)
    start = int(rng.integers(15, 30))
    length = int(rng.integers(10, 17))
    return SynthConfig(frames=80, motion="sinusoid", amplitude=float(rng.uniform(15, 30)),
                       period=float(rng.uniform(50, 80)), deformation=1.0, noise=0.05,
                       illumination=0.2, occlusions=((start, start + length),),
                       coverage=float(rng.uniform(0.3, 0.5)), seed=seed)
