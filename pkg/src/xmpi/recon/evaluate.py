"""Reconstruction metrics against a known ground truth: mask IoU, volume error, projection PSNR."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..forward import FrameStack, project_points
from ..phantom import ScalarField4D
from .field import detector_grid


class GridMismatchError(ValueError):
    pass


@dataclass
class TimePointMetrics:
    t: float
    iou: float
    volume_error_pct: float
    measured_psnr: list[float] = field(default_factory=list)
    held_out_psnr: list[float] = field(default_factory=list)


@dataclass
class EvaluationReport:
    threshold: float
    points: list[TimePointMetrics]

    @property
    def iou(self) -> np.ndarray:
        return np.array([p.iou for p in self.points])

    @property
    def volume_error_pct(self) -> np.ndarray:
        return np.array([p.volume_error_pct for p in self.points])

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "points": [asdict(p) for p in self.points],
                "mean_iou": float(np.mean(self.iou)) if self.points else None}


def check_same_grid(a: ScalarField4D, b: ScalarField4D):
    if not (a.is_gridded and b.is_gridded):
        raise GridMismatchError("both fields must be gridded")
    if a.data.shape != b.data.shape:
        raise GridMismatchError(f"grid shapes differ: {a.data.shape} vs {b.data.shape}")
    if not np.isclose(a.voxel_pitch, b.voxel_pitch, rtol=1e-9):
        raise GridMismatchError(f"voxel pitches differ: {a.voxel_pitch} vs {b.voxel_pitch}")
    if not np.allclose(a.origin, b.origin, atol=1e-6 * a.voxel_pitch):
        raise GridMismatchError(f"grid origins differ: {a.origin} vs {b.origin}")
    if not np.allclose(a.times, b.times, atol=1e-6):
        raise GridMismatchError("time samples differ")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; two empty masks count as identical."""
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def psnr(pred: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(pred, float) - np.asarray(ref, float)) ** 2))
    if mse == 0:
        return float("inf")
    return 10 * np.log10(peak * peak / mse)


def sample_on_grid(source: ScalarField4D, like: ScalarField4D) -> ScalarField4D:
    """Evaluate ``source`` (analytic or gridded) at the voxel centres and times of ``like``."""
    _, nz, ny, nx = like.data.shape
    ax = [like.origin[i] + np.arange(n) * like.voxel_pitch for i, n in enumerate((nx, ny, nz))]
    Z, Y, X = np.meshgrid(ax[2], ax[1], ax[0], indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1)
    data = np.stack([np.asarray(source(pts, float(t)), np.float32) for t in like.times])
    return ScalarField4D(data=data, voxel_pitch=like.voxel_pitch, times=like.times.copy(),
                         origin=like.origin.copy(), metadata={"source": "sample_on_grid"})


def _frame_at(stack: FrameStack, t: float):
    k = int(np.argmin(np.abs(stack.timestamps - t)))
    if abs(stack.timestamps[k] - t) > 1e-6 * max(abs(t), 1.0) + 1e-6:
        return None
    return np.asarray(stack.frames[k], float)


def _stack_grid(stack: FrameStack):
    h, w = stack.frames.shape[-2:]
    center = stack.metadata.get("roi_center_uv_um", (0.0, 0.0))
    return detector_grid((h, w), stack.pixel_pitch, center)


def evaluate_reconstruction(recon: ScalarField4D, truth: ScalarField4D, stacks=None, threshold: float | None = None,
                            held_out_angles=(), held_out_shape=(64, 64), held_out_pitch: float | None = None,
                            step: float | None = None) -> EvaluationReport:
    """Compare a gridded reconstruction with the ground truth.

    ``truth`` may be analytic, in which case it is sampled on the
    reconstruction grid; a bare phantom is wrapped. Per time point the report holds the IoU of the
    masks ``µ > threshold`` (default half the truth maximum), the signed
    volume error in percent, the PSNR of the reconstruction's projections
    against the measured frames of ``stacks`` (view angle from
    ``metadata["view_angle_deg"]``, frames matched by timestamp) and the PSNR
    against noiseless truth projections at each of ``held_out_angles``.
    """
    if not recon.is_gridded:
        raise GridMismatchError("reconstruction must be gridded")
    if not isinstance(truth, ScalarField4D):
        truth = ScalarField4D.from_phantom(truth)
    gt = truth if truth.is_gridded else sample_on_grid(truth, recon)
    check_same_grid(recon, gt)
    if threshold is None:
        threshold = 0.5 * float(gt.data.max())
    if held_out_pitch is None:
        held_out_pitch = recon.voxel_pitch
    points = []
    for k, t in enumerate(recon.times):
        a = recon.data[k] > threshold
        b = gt.data[k] > threshold
        vt = np.count_nonzero(b)
        verr = 100.0 * (np.count_nonzero(a) - vt) / vt if vt else (0.0 if not a.any() else float("inf"))
        tp = TimePointMetrics(float(t), mask_iou(a, b), float(verr))
        for st in stacks or ():
            meas = _frame_at(st, t)
            if meas is None:
                continue
            uu, vv = _stack_grid(st)
            pred = project_points(recon, float(st.metadata["view_angle_deg"]), float(t), uu, vv, step)
            tp.measured_psnr.append(psnr(pred, meas))
        for ang in held_out_angles:
            uu, vv = detector_grid(held_out_shape, held_out_pitch)
            pred = project_points(recon, float(ang), float(t), uu, vv, step)
            ref = project_points(truth, float(ang), float(t), uu, vv, step)
            tp.held_out_psnr.append(psnr(pred, ref))
        points.append(tp)
    return EvaluationReport(float(threshold), points)
