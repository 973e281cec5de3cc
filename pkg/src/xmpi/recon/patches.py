"""Random patch grids with flexible position, scale and stride."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates


@dataclass(frozen=True)
class PatchSpec:
    """A ``size × size`` sampling grid centred at ``center`` (row, col) px.

    Neighbouring grid points are ``scale * stride`` pixels apart.
    """

    center: tuple[float, float]
    scale: float = 1.0
    stride: int = 1
    image_index: int = 0

    @property
    def spacing(self) -> float:
        return self.scale * self.stride

    def grid(self, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
        offs = (np.arange(size) - (size - 1) / 2) * self.spacing
        rows, cols = np.meshgrid(self.center[0] + offs, self.center[1] + offs, indexing="ij")
        return rows, cols

    def in_bounds(self, shape, size: int = 32, tol: float = 1e-9) -> bool:
        half = (size - 1) / 2 * self.spacing
        return all(c - half >= -tol and c + half <= n - 1 + tol for c, n in zip(self.center, shape))


def sample_patch_specs(shape, rng: np.random.Generator, n: int, size: int = 32,
                       n_images: int = 1) -> list[PatchSpec]:
    """``n`` specs drawn uniformly over spacing, then over valid centres.

    Spacing is drawn from ``[1, (min(shape) - 1) / (size - 1)]`` and split into
    an integer stride and a residual scale in ``[1, 2)``.
    """
    h, w = shape
    if min(h, w) < size:
        raise ValueError(f"image {shape} smaller than patch size {size}")
    max_spacing = (min(h, w) - 1) / (size - 1)
    out = []
    for _ in range(n):
        spacing = rng.uniform(1.0, max_spacing)
        stride = max(int(math.floor(spacing)), 1)
        half = (size - 1) / 2 * spacing
        r = rng.uniform(half, h - 1 - half)
        c = rng.uniform(half, w - 1 - half)
        idx = int(rng.integers(n_images)) if n_images > 1 else 0
        out.append(PatchSpec((r, c), spacing / stride, stride, idx))
    return out


def extract_patch(image: np.ndarray, spec: PatchSpec, size: int = 32) -> np.ndarray:
    rows, cols = spec.grid(size)
    return map_coordinates(np.asarray(image, float), [rows, cols], order=1, mode="nearest")


def sample_patches(images, rng: np.random.Generator, n: int, size: int = 32):
    """``n`` pairs ``(PatchSpec, patch)`` from a list of same-shape images."""
    images = [np.asarray(im) for im in images]
    if not images:
        raise ValueError("need at least one image")
    specs = sample_patch_specs(images[0].shape, rng, n, size, len(images))
    return [(s, extract_patch(images[s.image_index], s, size)) for s in specs]
