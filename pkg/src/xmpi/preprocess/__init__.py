"""Frame preprocessing: flat-field, denoising, registration, harmonization, segmentation."""

from .denoise import anisotropic_tv, cycle_spin_denoise, denoise_frame, haar_forward, haar_inverse, tv_bregman
from .flatfield import DegenerateFlatError, FlatFieldBasis, fit_flatfield_basis, flatfield_correct
from .harmonize import RangeError, harmonize_views
from .pipeline import STAGES, PreprocessConfig, PreprocessResult, StageOrderError, preprocess_views
from .registration import AffineTransform2D, mutual_information, register_pair, register_stack, warp
from .segment import segment_droplets

__all__ = [
    "STAGES", "AffineTransform2D", "DegenerateFlatError", "FlatFieldBasis", "PreprocessConfig", "PreprocessResult",
    "RangeError", "StageOrderError", "anisotropic_tv", "cycle_spin_denoise", "denoise_frame", "fit_flatfield_basis",
    "flatfield_correct", "haar_forward", "haar_inverse", "harmonize_views", "mutual_information", "preprocess_views",
    "register_pair", "register_stack", "segment_droplets", "tv_bregman", "warp",
]
