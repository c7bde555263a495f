"""Dense (h, w, c) storage helpers and the 2-D DFT conventions.

Tensors are plain ``numpy`` arrays of shape ``(h, w, c)``; spectra are
complex arrays of the same shape holding the full (not half) spectrum of
every channel. The forward transform is unnormalized and the inverse carries
the ``1/(h*w)`` factor.
"""
import numpy as np

from .errors import InvalidInputError, OracleSizeError, SymmetryError

NAIVE_DFT_CAP = 4096
IMAG_TOL = 1e-6


def as_tensor3(a, name="tensor"):
    """Coerce ``a`` to a finite float64 array of shape (h, w, c)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidInputError(f"{name}: expected 2 or 3 dims, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise InvalidInputError(f"{name}: empty dimension in shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: contains non-finite values")
    return arr


def dft2(t):
    """Per-channel unnormalized forward DFT of a real (h, w, c) tensor."""
    t = as_tensor3(t)
    return np.fft.fft2(t, axes=(0, 1))


def idft2(s, tol=IMAG_TOL):
    """Inverse of :func:`dft2`, returning a real tensor.

    Raises :class:`SymmetryError` if the imaginary residue of the inverse
    exceeds ``tol`` times the RMS magnitude of the signal; smaller residues
    are dropped.
    """
    s = np.asarray(s, dtype=np.complex128)
    if s.ndim == 2:
        s = s[:, :, None]
    if s.ndim != 3:
        raise InvalidInputError(f"spectrum: expected 3 dims, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("spectrum: contains non-finite values")
    t = np.fft.ifft2(s, axes=(0, 1))
    h, w = s.shape[:2]
    # ||s||_F / sqrt(hw) is the spatial-domain norm by Parseval
    scale = np.linalg.norm(s) / np.sqrt(h * w)
    resid = np.abs(t.imag).max()
    if resid > tol * max(scale, np.finfo(float).tiny):
        raise SymmetryError(
            f"imaginary residue {resid:.3e} exceeds {tol:g} * {scale:.3e}")
    return t.real.copy()


def _dft_matrix(n):
    k = np.arange(n)
    # reduce the index product modulo n before scaling: keeps the phase exact
    phase = (np.outer(k, k) % n) * (-2.0 * np.pi / n)
    return np.exp(1j * phase)


def naive_dft2(t):
    """Direct double-sum DFT, used as a test oracle for :func:`dft2`."""
    t = as_tensor3(t)
    h, w, c = t.shape
    if h * w > NAIVE_DFT_CAP:
        raise OracleSizeError(f"naive_dft2 is capped at {NAIVE_DFT_CAP} samples, got {h * w}")
    fh = _dft_matrix(h)
    fw = _dft_matrix(w)
    out = np.empty((h, w, c), dtype=np.complex128)
    for ch in range(c):
        # sum over rows, then over columns
        out[:, :, ch] = fh @ t[:, :, ch] @ fw.T
    return out


def hann1(n):
    if n < 1:
        raise InvalidInputError("window length must be >= 1")
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / (n - 1))


def hann2(h, w):
    """Separable symmetric Hann window as an (h, w, 1) tensor."""
    if h < 1 or w < 1:
        raise InvalidInputError(f"hann2 needs positive dims, got {h}x{w}")
    return np.outer(hann1(h), hann1(w))[:, :, None]


def conj_flip(s):
    """Return S*[(-u) mod h, (-v) mod w], the Hermitian partner of ``s``."""
    return np.conj(np.roll(np.flip(s, axis=(0, 1)), shift=(1, 1), axis=(0, 1)))
