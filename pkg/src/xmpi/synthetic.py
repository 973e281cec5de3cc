"""Synthetic images with known ground truth for checking the preprocessing chain.

All generators are pure functions of their arguments and ``seed``.
"""

from __future__ import annotations

import numpy as np

from .phantom import water_mu


def sphere_transmission(shape, center, radius: float, mu: float | None = None, pitch: float = 1.0) -> np.ndarray:
    """Analytic transmission ``exp(-2µ√(R²-ρ²))`` of a sphere; ``center`` and ``radius`` in pixels."""
    mu = water_mu() if mu is None else mu
    h, w = shape
    r, c = np.mgrid[0:h, 0:w].astype(float)
    rho2 = (r - center[0]) ** 2 + (c - center[1]) ** 2
    chord = 2 * np.sqrt(np.clip(radius**2 - rho2, 0, None)) * pitch
    return np.exp(-mu * chord)


def noisy_sphere_suite(n_frames: int = 8, snr: float = 5.0, shape=(128, 128), seed: int = 0,
                       pitch: float = 1.0) -> tuple[np.ndarray, np.ndarray, float]:
    """Clean and noisy sphere transmission frames.

    Sphere radius (25 to 45 px) and centre vary per frame. Gaussian noise has
    ``sigma = contrast / snr`` where contrast is the deepest absorption
    ``1 - min(clean)`` over the suite. Returns ``(clean, noisy, sigma)``.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    clean = []
    for _ in range(n_frames):
        rad = rng.uniform(25, 45)
        cen = (rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w)
        clean.append(sphere_transmission(shape, cen, rad, pitch=pitch))
    clean = np.stack(clean)
    sigma = float(1.0 - clean.min()) / snr
    return clean, clean + rng.normal(0.0, sigma, clean.shape), sigma


def smooth_modes(shape, n_modes: int = 2, period: float = 30.0, seed: int = 0) -> np.ndarray:
    """``n_modes`` orthonormal (as flattened vectors) smooth illumination modes.

    Each mode is a random superposition of oblique sinusoids with wavelength
    around ``period`` pixels; the set is orthonormalised by QR.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    r, c = np.mgrid[0:h, 0:w].astype(float)
    raw = []
    for _ in range(n_modes):
        img = np.zeros(shape)
        for _ in range(4):
            ang = rng.uniform(0, np.pi)
            k = 2 * np.pi / (period * rng.uniform(0.7, 1.4))
            img += rng.normal() * np.cos(k * (r * np.sin(ang) + c * np.cos(ang)) + rng.uniform(0, 2 * np.pi))
        raw.append(img.ravel())
    q, _ = np.linalg.qr(np.array(raw).T)
    return q.T.reshape(n_modes, h, w)


def flat_series(mean_flat: np.ndarray, modes: np.ndarray, n: int, amplitude: float, seed: int = 0,
                noise: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Flats ``mean + Σ a_j mode_j`` (+ optional Gaussian noise); returns ``(flats, coefficients)``."""
    rng = np.random.default_rng(seed)
    coef = rng.normal(0.0, amplitude, (n, modes.shape[0]))
    flats = mean_flat[None] + np.tensordot(coef, modes, axes=1)
    if noise > 0:
        flats = flats + rng.normal(0.0, noise, flats.shape)
    return flats, coef


def dark_disk(shape=(128, 128), radius: float = 20.0, contrast: float = 0.1, noise: float = 0.01,
              center=None, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Unit background with a disk darker by ``contrast`` plus Gaussian noise; returns ``(frame, true_mask)``."""
    rng = np.random.default_rng(seed)
    h, w = shape
    if center is None:
        center = ((h - 1) / 2, (w - 1) / 2)
    r, c = np.mgrid[0:h, 0:w].astype(float)
    mask = (r - center[0]) ** 2 + (c - center[1]) ** 2 <= radius**2
    frame = 1.0 - contrast * mask + rng.normal(0.0, noise, shape)
    return frame, mask


def textured_scene(shape=(128, 128), seed: int = 0) -> np.ndarray:
    """Two overlapping absorbing spheres on a smoothly structured flat, without rotational symmetry."""
    h, w = shape
    mode = smooth_modes(shape, 1, 40.0, seed=seed + 4)[0] * np.sqrt(h * w)
    a = sphere_transmission(shape, (0.39 * h, 0.47 * w), 0.23 * min(h, w), mu=4e-3)
    b = sphere_transmission(shape, (0.66 * h, 0.62 * w), 0.14 * min(h, w), mu=6e-3)
    return a * b * (1 + 0.05 * mode)
