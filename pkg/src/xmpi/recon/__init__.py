"""Implicit 4D absorption field, differentiable projector, adversarial training and volume extraction."""

from .evaluate import (EvaluationReport, GridMismatchError, TimePointMetrics, evaluate_reconstruction, mask_iou,
                       psnr, sample_on_grid)
from .extract import extract_sequence, extract_volume
from .field import ImplicitField, Normalization, RangeError, detector_grid, pixel_to_uv, render_projection, view_axes
from .losses import adversarial_losses, weighted_mse
from .patches import PatchSpec, extract_patch, sample_patch_specs, sample_patches
from .train import (DivergenceError, TrainConfig, TrainingData, TrainResult, build_field, load_field_checkpoint,
                    prepare_training_data, save_field_checkpoint, solve_center, train_reconstruction)

__all__ = [
    "DivergenceError", "EvaluationReport", "GridMismatchError", "ImplicitField", "Normalization", "PatchSpec",
    "RangeError", "TimePointMetrics", "TrainConfig", "TrainResult", "TrainingData", "adversarial_losses",
    "build_field", "detector_grid", "evaluate_reconstruction", "extract_patch", "extract_sequence",
    "extract_volume", "load_field_checkpoint", "mask_iou", "pixel_to_uv", "prepare_training_data", "psnr",
    "render_projection", "sample_on_grid", "sample_patch_specs", "sample_patches", "save_field_checkpoint",
    "solve_center", "train_reconstruction", "view_axes", "weighted_mse",
]
