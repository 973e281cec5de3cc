"""Fixed-order preprocessing chain with per-stage provenance.

Order: flatfield -> denoise -> register -> harmonize -> segment. Each stage
appends a record to ``metadata["provenance"]`` and refuses to run on a stack
whose last preprocessing stage is not its predecessor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..forward import FrameStack
from .denoise import denoise_frame
from .flatfield import FlatFieldBasis, fit_flatfield_basis, flatfield_correct
from .harmonize import harmonize_views
from .registration import register_stack
from .segment import segment_droplets

STAGES = ("flatfield", "denoise", "register", "harmonize", "segment")


class StageOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    n_components: int = 7
    downsample: tuple[int, int] = (2, 4)
    background_percentile: float = 30.0
    subtract_dark: bool = True
    wavelet_max_shift: int = 2
    tv_weight: float = 0.9
    tv_max_iter: int = 100
    tv_tol: float = 1e-3
    #: one switch per beamlet; by default only the first (C111) stack is registered
    register: tuple[bool, ...] = (True, False)
    mi_bins: int = 64
    pyramid_levels: int = 3
    crop_size: int = 128
    roi_centers: tuple | None = None
    highpass_sigma: float = 16.0
    canny_sigma: float = 1.5
    canny_quantiles: tuple[float, float] = (0.7, 0.9)

    def to_dict(self) -> dict:
        return asdict(self)


def _stages_done(stack: FrameStack) -> list[str]:
    return [p["stage"] if isinstance(p, dict) else p for p in stack.metadata.get("provenance", [])]


def check_stage(stack: FrameStack, stage: str):
    """Raise unless ``stage`` is the next one for ``stack``."""
    i = STAGES.index(stage)
    done = [s for s in _stages_done(stack) if s in STAGES]
    last = done[-1] if done else None
    expected = STAGES[i - 1] if i > 0 else None
    if stage in done:
        raise StageOrderError(f"stage {stage!r} already applied to this stack")
    if last != expected:
        raise StageOrderError(f"stage {stage!r} must follow {expected!r}, but the last stage was {last!r}")


def _record(stack: FrameStack, stage: str, **params) -> FrameStack:
    prov = list(stack.metadata.get("provenance", []))
    prov.append({"stage": stage, **params})
    stack.metadata["provenance"] = prov
    return stack


def flatfield_stage(stack: FrameStack, flats: FrameStack, darks: FrameStack | None,
                    config: PreprocessConfig = PreprocessConfig()) -> tuple[FrameStack, FlatFieldBasis]:
    check_stage(stack, "flatfield")
    frames = np.asarray(stack.frames, float)
    flat = np.asarray(flats.frames, float)
    if darks is not None and config.subtract_dark:
        # dark offset comes off before the flat model is built
        dark = np.asarray(darks.frames, float).mean(axis=0)
        frames = frames - dark
        flat = flat - dark
    basis = fit_flatfield_basis(flat, config.n_components, config.downsample)
    out = np.stack([flatfield_correct(f, basis, percentile=config.background_percentile) for f in frames])
    new = stack.replace_frames(out.astype(np.float32))
    return _record(new, "flatfield", n_components=config.n_components, downsample=list(config.downsample),
                   dark_subtracted=darks is not None and config.subtract_dark), basis


def denoise_stage(stack: FrameStack, config: PreprocessConfig = PreprocessConfig()) -> FrameStack:
    check_stage(stack, "denoise")
    out = np.stack([denoise_frame(f, config.tv_weight, config.wavelet_max_shift, config.tv_max_iter, config.tv_tol)
                    for f in stack.frames])
    new = stack.replace_frames(out.astype(np.float32))
    return _record(new, "denoise", tv_weight=config.tv_weight, max_shift=config.wavelet_max_shift,
                   tv_max_iter=config.tv_max_iter, tv_tol=config.tv_tol)


def register_stage(stack: FrameStack, enabled: bool = True, config: PreprocessConfig = PreprocessConfig()):
    check_stage(stack, "register")
    if not enabled:
        new = stack.replace_frames(stack.frames)
        return _record(new, "register", skipped=True), None
    res = register_stack(stack.frames, 0, config.mi_bins, config.pyramid_levels)
    new = stack.replace_frames(res.warped.astype(np.float32))
    new.metadata["registration"] = {
        "matrices": [t.matrix.tolist() for t in res.transforms],
        "translations": [t.translation.tolist() for t in res.transforms],
        "warnings": res.warnings,
    }
    return _record(new, "register", skipped=False, bins=config.mi_bins, levels=config.pyramid_levels), res


def harmonize_stage(stack_a: FrameStack, stack_b: FrameStack, config: PreprocessConfig = PreprocessConfig()):
    check_stage(stack_a, "harmonize")
    check_stage(stack_b, "harmonize")
    a, b = harmonize_views(stack_a, stack_b, config.roi_centers, config.crop_size)
    return (_record(a, "harmonize", crop_size=config.crop_size),
            _record(b, "harmonize", crop_size=config.crop_size))


def segment_stage(stack: FrameStack, config: PreprocessConfig = PreprocessConfig()):
    check_stage(stack, "segment")
    lo, hi = config.canny_quantiles
    masks = np.stack([segment_droplets(f, config.highpass_sigma, config.canny_sigma, lo, hi)
                      for f in stack.frames])
    new = stack.replace_frames(stack.frames)
    return _record(new, "segment", highpass_sigma=config.highpass_sigma, canny_sigma=config.canny_sigma,
                   quantiles=[lo, hi]), masks


@dataclass
class PreprocessResult:
    stacks: list[FrameStack]
    masks: list[np.ndarray]
    bases: list[FlatFieldBasis]
    registrations: list = field(default_factory=list)


def preprocess_views(stacks, flats, darks, config: PreprocessConfig = PreprocessConfig(),
                     progress=None) -> PreprocessResult:
    """Run the full chain on two beamlet stacks (with their flat and dark series)."""
    if len(stacks) != 2:
        raise ValueError("the chain harmonizes exactly two views")
    reg_flags = tuple(config.register) + (False,) * (2 - len(config.register))
    inter, bases, regs = [], [], []
    for i, st in enumerate(stacks):
        st, basis = flatfield_stage(st, flats[i], darks[i] if darks is not None else None, config)
        if progress:
            progress(f"view {i}: flatfield")
        st = denoise_stage(st, config)
        if progress:
            progress(f"view {i}: denoise")
        st, reg = register_stage(st, reg_flags[i], config)
        if progress:
            progress(f"view {i}: register")
        inter.append(st)
        bases.append(basis)
        regs.append(reg)
    a, b = harmonize_stage(inter[0], inter[1], config)
    out, masks = [], []
    for st in (a, b):
        st, m = segment_stage(st, config)
        out.append(st)
        masks.append(m)
    return PreprocessResult(out, masks, bases, regs)
