"""Bring two beamlet stacks onto one pixel grid and crop a common-size ROI."""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.ndimage import zoom

from ..forward import FrameStack
from .segment import mask_centroid, segment_droplets


class RangeError(ValueError):
    pass


def pitch_ratio(coarse: float, fine: float, max_denominator: int = 16) -> Fraction:
    r = Fraction(coarse / fine).limit_denominator(max_denominator)
    if r <= 0 or abs(float(r) - coarse / fine) > 1e-9 * coarse / fine:
        raise ValueError(f"pixel pitch ratio {coarse / fine} is not a small positive rational")
    return r


def upsample_stack(frames: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear upsampling of every frame; pixel footprints stay aligned (grid mode)."""
    if factor == 1:
        return np.asarray(frames, float)
    return np.stack([zoom(np.asarray(f, float), factor, order=1, mode="nearest", grid_mode=True) for f in frames])


def auto_roi_center(frames: np.ndarray):
    """Centroid (row, col) of the droplet mask of the time-averaged frame; image centre if none found."""
    mean = np.mean(frames, axis=0)
    c = mask_centroid(segment_droplets(mean))
    if c is None:
        return ((mean.shape[0] - 1) / 2, (mean.shape[1] - 1) / 2)
    return c


def crop_roi(frames: np.ndarray, center, size: int = 128):
    """Crop ``size × size`` around ``center`` (row, col). Returns (crop, (row0, col0))."""
    h, w = frames.shape[-2:]
    r0 = int(round(center[0] - (size - 1) / 2))
    c0 = int(round(center[1] - (size - 1) / 2))
    if r0 < 0 or c0 < 0 or r0 + size > h or c0 + size > w:
        raise RangeError(
            f"ROI of size {size} centred at ({center[0]:.1f}, {center[1]:.1f}) exceeds the {h}×{w} frame"
        )
    return frames[..., r0:r0 + size, c0:c0 + size], (r0, c0)


def harmonize_views(stack_a: FrameStack, stack_b: FrameStack, roi_centers=None, size: int = 128):
    """Resample the coarser stack to the finer pitch and crop both to ``size × size``.

    ``roi_centers`` optionally gives the (row, col) crop centre per stack on
    the common grid; otherwise the centroid of the segmented mean frame is
    used. The crop centre in detector coordinates (µm from the beam axis) is
    stored as ``metadata["roi_center_uv_um"]``.
    """
    pa, pb = float(stack_a.pixel_pitch), float(stack_b.pixel_pitch)
    fine = min(pa, pb)
    out = []
    for i, st in enumerate((stack_a, stack_b)):
        factor = float(pitch_ratio(st.pixel_pitch, fine)) if st.pixel_pitch != fine else 1.0
        frames = upsample_stack(st.frames, factor)
        center = roi_centers[i] if roi_centers is not None else auto_roi_center(frames)
        crop, (r0, c0) = crop_roi(frames, center, size)
        h, w = frames.shape[-2:]
        rc, cc = r0 + (size - 1) / 2, c0 + (size - 1) / 2
        uv = ((cc - (w - 1) / 2) * fine, (rc - (h - 1) / 2) * fine)
        new = FrameStack(crop, st.timestamps.copy(), list(st.shot_records), st.beamlet_id, fine,
                         dict(st.metadata))
        new.metadata.update(
            roi_center_uv_um=[float(uv[0]), float(uv[1])],
            roi_origin_px=[r0, c0],
            upsample_factor=factor,
        )
        out.append(new)
    return out[0], out[1]
