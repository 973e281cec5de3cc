"""Dynamic flat-field correction with principal-component eigen-flats."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, zoom


class DegenerateFlatError(ValueError):
    pass


@dataclass
class FlatFieldBasis:
    """Mean flat plus ``k`` eigen-flats.

    ``components_lowres`` are orthonormal (as flattened vectors) at the
    downsampled resolution; ``components`` are the same images upsampled
    bilinearly to the frame shape for application.
    """

    mean_flat: np.ndarray
    components_lowres: np.ndarray
    components: np.ndarray
    downsample_factors: tuple[int, int] = (2, 4)
    singular_values: np.ndarray | None = None

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def block_mean(img: np.ndarray, factors) -> np.ndarray:
    """Average over non-overlapping ``factors`` blocks; trailing rows/cols that do not fill a block are dropped."""
    fy, fx = factors
    h, w = img.shape[-2:]
    hh, ww = h // fy, w // fx
    x = img[..., :hh * fy, :ww * fx]
    return x.reshape(x.shape[:-2] + (hh, fy, ww, fx)).mean(axis=(-3, -1))


def upsample_bilinear(img: np.ndarray, shape) -> np.ndarray:
    """Bilinear upsampling of a block-mean image back onto the full pixel grid (block centres aligned)."""
    return zoom(img, (shape[0] / img.shape[0], shape[1] / img.shape[1]), order=1, mode="nearest", grid_mode=True)


def fit_flatfield_basis(flats, n_components: int = 7, downsample=(2, 4)) -> FlatFieldBasis:
    flats = np.asarray(flats, dtype=np.float64)
    if flats.ndim != 3:
        raise ValueError("flats must be an (n, H, W) array")
    if n_components < 0:
        raise ValueError("n_components must be >= 0")
    n = flats.shape[0]
    if n < n_components + 1:
        raise ValueError(f"need at least {n_components + 1} flats for {n_components} components, got {n}")
    mean = flats.mean(axis=0)
    shape = mean.shape
    low = block_mean(flats - mean, downsample)
    lh, lw = low.shape[1:]
    if n_components == 0:
        comps_low = np.zeros((0, lh, lw))
        sv = np.zeros(0)
    else:
        _, s, vt = np.linalg.svd(low.reshape(n, -1), full_matrices=False)
        comps_low = vt[:n_components].reshape(n_components, lh, lw)
        sv = s[:n_components]
    comps = np.stack([upsample_bilinear(c, shape) for c in comps_low]) if n_components else np.zeros((0,) + shape)
    return FlatFieldBasis(mean, comps_low, comps, tuple(downsample), sv)


def flatfield_coefficients(frame, basis: FlatFieldBasis, percentile: float = 30.0,
                           select_sigma: float = 3.0, iterations: int = 3) -> np.ndarray:
    """Least-squares weights of the eigen-flats fitted on background pixels (sample-free proxy).

    The first fit uses every pixel. Each further pass keeps the pixels above
    the ``percentile`` of the current transmission estimate ``frame / flat``,
    smoothed by ``select_sigma`` px so pixels are not chosen for their own
    upward noise, and refits. Judging brightness against the fitted flat
    rather than the raw frame keeps the fit region spread over the field of
    view when the illumination changes shape from pulse to pulse.
    """
    if basis.n_components == 0:
        return np.zeros(0)
    frame = np.asarray(frame, float)
    resid = frame - basis.mean_flat
    tiny = 1e-9 * max(float(np.mean(np.abs(basis.mean_flat))), 1e-300)
    sel = np.ones(frame.shape, bool)
    for it in range(iterations + 1):
        c, *_ = np.linalg.lstsq(basis.components[:, sel].T, resid[sel], rcond=None)
        if it == iterations:
            break
        denom = basis.mean_flat + np.tensordot(c, basis.components, axes=1)
        rel = frame / np.where(np.abs(denom) > tiny, denom, tiny)
        if select_sigma > 0:
            rel = gaussian_filter(rel, select_sigma, mode="nearest")
        sel = rel > np.percentile(rel, percentile)
        if sel.sum() < basis.n_components:
            sel = np.ones(frame.shape, bool)
    return c


def flatfield_correct(frame, basis: FlatFieldBasis, floor: float | None = None, percentile: float = 30.0,
                      max_floor_fraction: float = 0.1) -> np.ndarray:
    """``frame / (mean_flat + Σ c_j component_j)`` with a denominator floor.

    ``floor`` defaults to 1 % of the mean flat's average level.
    """
    frame = np.asarray(frame, float)
    if frame.shape != basis.mean_flat.shape:
        raise ValueError(f"frame shape {frame.shape} does not match basis {basis.mean_flat.shape}")
    c = flatfield_coefficients(frame, basis, percentile)
    denom = basis.mean_flat + np.tensordot(c, basis.components, axes=1) if c.size else basis.mean_flat.copy()
    if floor is None:
        floor = 0.01 * abs(float(np.mean(basis.mean_flat)))
    low = denom < floor
    if low.mean() > max_floor_fraction:
        raise DegenerateFlatError(
            f"flat denominator below floor {floor:.4g} on {100 * low.mean():.1f} % of pixels"
        )
    return frame / np.where(low, floor, denom)


def subtract_dark(frames, darks) -> np.ndarray:
    dark = np.asarray(darks, float).mean(axis=0)
    return np.asarray(frames, float) - dark
