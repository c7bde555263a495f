"""Differentiable correlation-filter layer.

Filters are solved per frequency as ridge regression over all cyclic shifts
of the training sample. Correlation is circular cross-correlation, realized
as ``Z * conj(F)`` in the frequency domain, so a circular shift of the
search features shifts the response by the same amount.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, InvalidInputError, OracleSizeError, SingularSolveError
from .ndkit import as_tensor3, dft2, idft2

DEFAULT_LAMBDA = 1e-4
ORACLE_CAP = 256


@dataclass(frozen=True)
class GaussianLabel:
    map: np.ndarray  # (h, w, 1)
    sigma: float
    peak: tuple  # (row, col), may be fractional for shifted targets


@dataclass(frozen=True)
class FilterBank:
    num: np.ndarray  # (h, w, c) complex, X^l * conj(Y)
    den: np.ndarray  # (h, w, 1) real, sum_k |X^k|^2 + lambda
    lam: float

    @property
    def channels(self):
        return self.num.shape[2]

    @property
    def filters(self):
        """Frequency-domain filters f^l = num^l / den."""
        return self.num / self.den


@dataclass(frozen=True)
class ResponseMap:
    map: np.ndarray  # (h, w, 1)
    peak_value: float
    peak: tuple  # integer (row, col) of the max
    subcell: tuple  # parabolic refinement in (-1, 1) per axis

    @property
    def peak_refined(self):
        return self.peak[0] + self.subcell[0], self.peak[1] + self.subcell[1]


def _label_values(h, w, sigma, center):
    rows = np.arange(h)[:, None] - center[0]
    cols = np.arange(w)[None, :] - center[1]
    # circular distance
    rows = (rows + h / 2.0) % h - h / 2.0
    cols = (cols + w / 2.0) % w - w / 2.0
    return np.exp(-(rows ** 2 + cols ** 2) / (2.0 * sigma ** 2))[:, :, None]


def gaussian_label(h, w, sigma, center=None):
    """Gaussian target map with circular distance, peaked at (h//2, w//2).

    ``center`` overrides the peak location (fractional allowed); used for
    desired responses whose target sits off-center.
    """
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    if h < 1 or w < 1:
        raise InvalidInputError("label dims must be positive")
    if center is None:
        center = (h // 2, w // 2)
    return GaussianLabel(_label_values(h, w, sigma, center), float(sigma), tuple(center))


def _check_pair(x, y):
    if x.shape[:2] != y.shape[:2]:
        raise InvalidInputError(f"feature grid {x.shape[:2]} != label grid {y.shape[:2]}")


def _features(x, name):
    return as_tensor3(getattr(x, "map", x), name)


def _label(y):
    return as_tensor3(getattr(y, "map", y), "label")


def _sample_terms(xf, yf):
    return xf * np.conj(yf), np.sum((xf * np.conj(xf)).real, axis=2, keepdims=True)


def solve_filters(x, y, lam=DEFAULT_LAMBDA):
    """Closed-form multi-channel ridge solve, stored as numerator/denominator."""
    xm, ym = _features(x, "x"), _label(y)
    _check_pair(xm, ym)
    if lam < 0:
        raise InvalidInputError(f"lambda must be >= 0, got {lam}")
    num, energy = _sample_terms(dft2(xm), dft2(ym))
    den = energy + lam
    if lam == 0 and np.any(den <= 0):
        raise SingularSolveError("lambda = 0 with a zero-energy frequency bin")
    return FilterBank(num, den, float(lam))


def _subcell(r, idx, axis):
    n = r.shape[axis]
    if n < 3:
        return 0.0
    i = idx[axis]
    sel = list(idx)
    sel[axis] = (i - 1) % n
    left = r[tuple(sel)]
    sel[axis] = (i + 1) % n
    right = r[tuple(sel)]
    mid = r[tuple(idx)]
    denom = left - 2.0 * mid + right
    if denom >= 0:  # flat or not a maximum
        return 0.0
    off = 0.5 * (left - right) / denom
    return float(np.clip(off, -0.999, 0.999))


def make_response(rmap):
    """Wrap a real response map with its peak and parabolic subcell offset."""
    rmap = np.asarray(rmap, dtype=np.float64)
    if rmap.ndim == 2:
        rmap = rmap[:, :, None]
    r2 = rmap[:, :, 0]
    idx = np.unravel_index(int(np.argmax(r2)), r2.shape)
    idx = (int(idx[0]), int(idx[1]))
    sub = (_subcell(r2, idx, 0), _subcell(r2, idx, 1))
    return ResponseMap(rmap, float(r2[idx]), idx, sub)


def response_spectrum(zf, bank):
    return np.sum(zf * np.conj(bank.num), axis=2, keepdims=True) / bank.den


def response(z, bank):
    """Correlation response of search features ``z`` with the filter bank."""
    zm = _features(z, "z")
    if zm.shape != bank.num.shape:
        raise InvalidInputError(f"search features {zm.shape} do not match filters {bank.num.shape}")
    return make_response(idft2(response_spectrum(dft2(zm), bank)))


def circulant_oracle(x, y, lam, z):
    """Brute-force spatial-domain ridge regression over all cyclic shifts.

    Row ``tau`` of the data matrix holds x^l[n + tau] for every (n, l), so the
    learned filter satisfies r[tau] = sum_{n,l} f^l[n] x^l[n + tau] ~ y[tau].
    """
    xm, ym, zm = _features(x, "x"), _label(y), _features(z, "z")
    _check_pair(xm, ym)
    h, w, c = xm.shape
    if h * w > ORACLE_CAP:
        raise OracleSizeError(f"circulant_oracle is capped at {ORACLE_CAP} cells, got {h * w}")
    if zm.shape != xm.shape:
        raise InvalidInputError("z must match x")

    def shifts(t):
        rows = []
        for dr in range(h):
            for dc in range(w):
                rows.append(np.roll(t, shift=(-dr, -dc), axis=(0, 1)).reshape(-1))
        return np.array(rows)

    A = shifts(xm)
    rhs = A.T @ ym.reshape(-1)
    f = np.linalg.solve(A.T @ A + lam * np.eye(A.shape[1]), rhs)
    r = shifts(zm) @ f
    return make_response(r.reshape(h, w, 1))


@dataclass
class CFCache:
    xf: np.ndarray
    zf: np.ndarray
    yf: np.ndarray
    den: np.ndarray
    rf: np.ndarray
    resid: np.ndarray  # R - desired, spatial
    shape: tuple


def cf_forward_loss(x, z, y, desired, lam=DEFAULT_LAMBDA, gamma=0.0, params_norm2=0.0):
    """L = ||R - desired||^2 + gamma * params_norm2 with R from solve-on-x,
    respond-on-z. Returns (loss, cache)."""
    xm, zm, ym, dm = _features(x, "x"), _features(z, "z"), _label(y), _label(desired)
    _check_pair(xm, ym)
    if zm.shape != xm.shape or dm.shape != ym.shape:
        raise InvalidInputError("x, z, y and desired must share the feature grid")
    xf, zf, yf = dft2(xm), dft2(zm), dft2(ym)
    den = np.sum((xf * np.conj(xf)).real, axis=2, keepdims=True) + lam
    rf = yf * np.sum(zf * np.conj(xf), axis=2, keepdims=True) / den
    r = idft2(rf)
    resid = r - dm
    loss = float(np.sum(resid ** 2) + gamma * params_norm2)
    return loss, CFCache(xf, zf, yf, den, rf, resid, xm.shape)


def _real_ifft(spec, what):
    t = np.fft.ifft2(spec, axes=(0, 1))
    scale = max(np.abs(t.real).max(), np.finfo(float).tiny)
    if np.abs(t.imag).max() > 1e-8 * max(scale, 1.0):
        raise ConsistencyError(f"{what}: gradient lost Hermitian symmetry")
    return t.real.copy()


def cf_backward(cache, grad_loss=1.0):
    """Gradients of the data term w.r.t. the x and z features.

    With G = DFT(2 (R - desired)), Q = sum_l Z^l conj(X^l) and D the shared
    denominator:
        dL/dz^l = IDFT(conj(Y) X^l G / D)
        dL/dx^l = IDFT(conj(G) Y Z^l / D - 2 Re(conj(G) R^) X^l / D)
    """
    g = dft2(2.0 * grad_loss * cache.resid)
    d = cache.den
    gz = np.conj(cache.yf) * cache.xf * g / d
    coupling = (np.conj(g) * cache.rf).real
    gx = np.conj(g) * cache.yf * cache.zf / d - 2.0 * coupling * cache.xf / d
    return _real_ifft(gx, "grad_x"), _real_ifft(gz, "grad_z")


def update_filters(bank, x_new, y, rate):
    """Exponential-window interpolation of numerator and denominator."""
    if not 0 < rate <= 1:
        raise InvalidInputError(f"rate must be in (0, 1], got {rate}")
    xm, ym = _features(x_new, "x_new"), _label(y)
    _check_pair(xm, ym)
    if xm.shape != bank.num.shape:
        raise InvalidInputError(f"sample {xm.shape} does not match bank {bank.num.shape}")
    num, energy = _sample_terms(dft2(xm), dft2(ym))
    lam = bank.lam
    new_num = (1 - rate) * bank.num + rate * num
    new_den = (1 - rate) * (bank.den - lam) + rate * energy + lam
    return FilterBank(new_num, new_den, lam)
