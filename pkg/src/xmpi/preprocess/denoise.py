"""Two-stage frame denoiser: cycle-spun Haar shrinkage, then anisotropic TV (split Bregman)."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.fft import dctn, idctn

_SQRT2 = math.sqrt(2.0)


# -- Haar wavelet -----------------------------------------------------------------


def haar_forward(img: np.ndarray, levels: int):
    """Orthonormal 2D Haar transform. Returns ``(approx, [(LH, HL, HH) finest..coarsest])``.

    Both image dimensions must be divisible by ``2**levels``.
    """
    a = np.asarray(img, float)
    details = []
    for _ in range(levels):
        lo = (a[0::2] + a[1::2]) / _SQRT2
        hi = (a[0::2] - a[1::2]) / _SQRT2
        ll = (lo[:, 0::2] + lo[:, 1::2]) / _SQRT2
        lh = (lo[:, 0::2] - lo[:, 1::2]) / _SQRT2
        hl = (hi[:, 0::2] + hi[:, 1::2]) / _SQRT2
        hh = (hi[:, 0::2] - hi[:, 1::2]) / _SQRT2
        details.append((lh, hl, hh))
        a = ll
    return a, details


def haar_inverse(approx: np.ndarray, details) -> np.ndarray:
    a = approx
    for lh, hl, hh in reversed(details):
        lo = np.empty((a.shape[0], a.shape[1] * 2))
        hi = np.empty_like(lo)
        lo[:, 0::2] = (a + lh) / _SQRT2
        lo[:, 1::2] = (a - lh) / _SQRT2
        hi[:, 0::2] = (hl + hh) / _SQRT2
        hi[:, 1::2] = (hl - hh) / _SQRT2
        a = np.empty((lo.shape[0] * 2, lo.shape[1]))
        a[0::2] = (lo + hi) / _SQRT2
        a[1::2] = (lo - hi) / _SQRT2
    return a


def wavelet_depth(shape) -> int:
    return max(int(math.floor(math.log2(min(shape)))) - 2, 1)


def mad_sigma(hh: np.ndarray) -> float:
    """Gaussian noise level from the median absolute finest diagonal coefficient."""
    return float(np.median(np.abs(hh)) / 0.6745)


def _soft(x, thr):
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


def _bayes_threshold(band: np.ndarray, sigma: float) -> float:
    if sigma <= 0:
        return 0.0
    signal_var = max(float(np.mean(band**2)) - sigma**2, 0.0)
    if signal_var == 0.0:
        return float(np.max(np.abs(band)))
    return sigma**2 / math.sqrt(signal_var)


def wavelet_shrink(img: np.ndarray, levels: int | None = None, sigma: float | None = None) -> np.ndarray:
    """Soft BayesShrink of every detail band; the noise level comes from the finest diagonal band
    and is rescaled per level by the ratio of that level's diagonal MAD to the finest one."""
    img = np.asarray(img, float)
    h, w = img.shape
    if levels is None:
        levels = wavelet_depth(img.shape)
    m = 2**levels
    ph, pw = (-h) % m, (-w) % m
    padded = np.pad(img, ((0, ph), (0, pw)), mode="symmetric") if ph or pw else img
    approx, details = haar_forward(padded, levels)
    s0 = mad_sigma(details[0][2]) if sigma is None else sigma
    out = []
    for lvl, bands in enumerate(details):
        s = s0
        if sigma is None and lvl > 0 and s0 > 0:
            # coarser levels see correlated noise after flat-fielding; never let their estimate exceed the finest
            s = min(mad_sigma(bands[2]), s0)
        out.append(tuple(_soft(b, _bayes_threshold(b, s)) for b in bands))
    return haar_inverse(approx, out)[:h, :w]


def cycle_spin_denoise(img: np.ndarray, max_shift: int = 2, levels: int | None = None) -> np.ndarray:
    """Average of wavelet shrinkage over circular shifts ``0..max_shift`` on each axis."""
    if not 0 <= max_shift <= 2:
        raise ValueError(f"max_shift must be 0, 1 or 2 (at most three shifts per axis), got {max_shift}")
    img = np.asarray(img, float)
    acc = np.zeros_like(img)
    shifts = list(itertools.product(range(max_shift + 1), repeat=2))
    for sy, sx in shifts:
        shifted = np.roll(img, (sy, sx), axis=(0, 1))
        acc += np.roll(wavelet_shrink(shifted, levels), (-sy, -sx), axis=(0, 1))
    return acc / len(shifts)


# -- total variation --------------------------------------------------------------


def _dx(u):
    d = np.zeros_like(u)
    d[:, :-1] = u[:, 1:] - u[:, :-1]
    return d


def _dy(u):
    d = np.zeros_like(u)
    d[:-1] = u[1:] - u[:-1]
    return d


def _dxt(p):
    """Adjoint of the forward difference along columns (Neumann)."""
    out = np.zeros_like(p)
    out[:, 0] = -p[:, 0]
    out[:, 1:-1] = p[:, :-2] - p[:, 1:-1]
    out[:, -1] = p[:, -2]
    return out


def _dyt(p):
    out = np.zeros_like(p)
    out[0] = -p[0]
    out[1:-1] = p[:-2] - p[1:-1]
    out[-1] = p[-2]
    return out


def anisotropic_tv(u: np.ndarray) -> float:
    u = np.asarray(u, float)
    return float(np.abs(np.diff(u, axis=0)).sum() + np.abs(np.diff(u, axis=1)).sum())


def tv_bregman(f: np.ndarray, weight: float = 0.9, max_iter: int = 100, tol: float = 1e-3,
               mu: float | None = None) -> tuple[np.ndarray, int]:
    """Minimise ``TV_aniso(u) + weight * ||u - f||²`` by split Bregman.

    The u-subproblem is solved exactly with a DCT (Neumann boundaries).
    Stops when ``||u_k - u_{k-1}|| / ||u_k|| < tol``. Returns ``(u, iterations)``.
    """
    f = np.asarray(f, float)
    if f.ndim != 2:
        raise ValueError("tv_bregman expects a 2D image")
    h, w = f.shape
    if mu is None:
        mu = 2.0 * weight
    ky = 2.0 - 2.0 * np.cos(np.pi * np.arange(h) / h)
    kx = 2.0 - 2.0 * np.cos(np.pi * np.arange(w) / w)
    denom = 2.0 * weight + mu * (ky[:, None] + kx[None, :])
    u = f.copy()
    dx = np.zeros_like(f)
    dy = np.zeros_like(f)
    bx = np.zeros_like(f)
    by = np.zeros_like(f)
    it = 0
    for it in range(1, max_iter + 1):
        rhs = 2.0 * weight * f + mu * (_dxt(dx - bx) + _dyt(dy - by))
        u_new = idctn(dctn(rhs, type=2, norm="ortho") / denom, type=2, norm="ortho")
        gx, gy = _dx(u_new), _dy(u_new)
        dx = _soft(gx + bx, 1.0 / mu)
        dy = _soft(gy + by, 1.0 / mu)
        bx += gx - dx
        by += gy - dy
        change = np.linalg.norm(u_new - u) / max(np.linalg.norm(u_new), 1e-30)
        u = u_new
        if change < tol:
            break
    return u, it


def denoise_frame(frame: np.ndarray, tv_weight: float = 0.9, max_shift: int = 2, max_iter: int = 100,
                  tol: float = 1e-3, levels: int | None = None) -> np.ndarray:
    """Cycle-spun Haar shrinkage followed by anisotropic TV regularisation."""
    frame = np.asarray(frame, float)
    if not np.all(np.isfinite(frame)):
        raise ValueError("frame contains non-finite values")
    stage1 = cycle_spin_denoise(frame, max_shift, levels)
    out, _ = tv_bregman(stage1, tv_weight, max_iter, tol)
    return out
