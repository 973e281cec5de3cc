"""Mutual-information affine registration with a partial-volume joint histogram."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import affine_transform, map_coordinates

from .flatfield import block_mean


@dataclass(frozen=True)
class AffineTransform2D:
    """``x_moving = matrix @ x_reference + translation`` in (row, col) pixel coordinates."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(2))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        m = np.asarray(self.matrix, float).reshape(2, 2)
        t = np.asarray(self.translation, float).reshape(2)
        if abs(np.linalg.det(m)) <= 1e-9:
            raise ValueError("affine linear part is singular")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls()

    @classmethod
    def from_params(cls, params, center) -> "AffineTransform2D":
        """``params = (t_row, t_col, rotation_deg, log_scale_row, log_scale_col, shear)`` about ``center``."""
        ty, tx, rot, lsy, lsx, sh = params
        a = math.radians(rot)
        r = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        m = r @ np.array([[math.exp(lsy), sh], [0.0, math.exp(lsx)]])
        c = np.asarray(center, float)
        return cls(m, c - m @ c + np.array([ty, tx]))

    def compose(self, other: "AffineTransform2D") -> "AffineTransform2D":
        """Apply ``other`` first, then ``self``: x -> self(other(x))."""
        return AffineTransform2D(self.matrix @ other.matrix, self.matrix @ other.translation + self.translation)

    def inverse(self) -> "AffineTransform2D":
        mi = np.linalg.inv(self.matrix)
        return AffineTransform2D(mi, -mi @ self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, float) @ self.matrix.T + self.translation

    def shift_at(self, point) -> np.ndarray:
        """Displacement ``T(p) - p`` at ``point``."""
        p = np.asarray(point, float)
        return self.apply(p[None])[0] - p

    @property
    def rotation_deg(self) -> float:
        return math.degrees(math.atan2(self.matrix[1, 0], self.matrix[0, 0]))


def warp(image: np.ndarray, transform: AffineTransform2D, order: int = 1) -> np.ndarray:
    """Resample ``image`` so that ``out(x) = image(T(x))`` (bilinear by default)."""
    return affine_transform(np.asarray(image, float), transform.matrix, offset=transform.translation,
                            order=order, mode="nearest")


def _bin(img, lo, hi, bins):
    span = hi - lo if hi > lo else 1.0
    scaled = (np.asarray(img, float) - lo) / span * bins
    return np.clip(scaled.astype(np.int64), 0, bins - 1)


def _mi_from_joint(joint, bins):
    total = joint.sum()
    if total <= 0:
        return 0.0
    pj = joint.reshape(bins, bins) / total
    pr = pj.sum(axis=1)
    pm = pj.sum(axis=0)
    nz = pj > 0
    return float(np.sum(pj[nz] * np.log(pj[nz] / np.outer(pr, pm)[nz])))


def _pv_joint(ref_bins, points, mov_bins, bins):
    """Partial-volume joint histogram: each sample spreads unit weight over the bins of the
    four moving pixels around its mapped position with bilinear weights."""
    h, w = mov_bins.shape
    y, x = points[:, 0], points[:, 1]
    inside = (y >= 0) & (y <= h - 1) & (x >= 0) & (x <= w - 1)
    y, x, r = y[inside], x[inside], ref_bins[inside]
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    fy, fx = y - y0, x - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    rb = r * bins
    idx = np.concatenate([rb + mov_bins[y0, x0], rb + mov_bins[y0, x1], rb + mov_bins[y1, x0], rb + mov_bins[y1, x1]])
    wts = np.concatenate([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    return np.bincount(idx, weights=wts, minlength=bins * bins)


def mutual_information(reference: np.ndarray, moving: np.ndarray, transform: AffineTransform2D | None = None,
                       bins: int = 64, value_range=None) -> float:
    """MI (nats) between ``reference`` and ``moving`` resampled through ``transform``.

    Without a transform this is the plain joint-histogram MI of the two
    images. With one, a partial-volume histogram is used; reference pixels
    that map outside the moving image do not contribute.
    """
    ref = np.asarray(reference, float)
    mov = np.asarray(moving, float)
    if value_range is None:
        value_range = (min(ref.min(), mov.min()), max(ref.max(), mov.max()))
    lo, hi = value_range
    if hi <= lo:
        return 0.0
    rb = _bin(ref, lo, hi, bins).ravel()
    mb = _bin(mov, lo, hi, bins)
    if transform is None:
        joint = np.bincount(rb * bins + mb.ravel(), minlength=bins * bins).astype(float)
    else:
        pts = np.indices(ref.shape).reshape(2, -1).T.astype(float)
        joint = _pv_joint(rb, transform.apply(pts), mb, bins)
    return _mi_from_joint(joint, bins)


class _JitteredMI:
    """PV mutual information sampled at a fixed jittered set of reference positions.

    On the exact pixel grid the PV histogram is sharpest at integer
    displacements, which biases the optimum towards whole pixels. Sampling
    the reference at sub-pixel jittered points (bilinearly interpolated,
    fixed seed) makes the fractional offsets independent of the transform.
    """

    def __init__(self, ref, mov, bins, value_range, seed=0):
        rng = np.random.default_rng(seed)
        h, w = ref.shape
        pts = np.indices(ref.shape).reshape(2, -1).T.astype(float)
        pts += rng.uniform(-0.5, 0.5, pts.shape)
        pts[:, 0] = np.clip(pts[:, 0], 0, h - 1)
        pts[:, 1] = np.clip(pts[:, 1], 0, w - 1)
        vals = map_coordinates(ref, pts.T, order=1, mode="nearest")
        lo, hi = value_range
        self.pts = pts
        self.ref_bins = _bin(vals, lo, hi, bins)
        self.mov_bins = _bin(mov, lo, hi, bins)
        self.bins = bins

    def __call__(self, transform: AffineTransform2D) -> float:
        return _mi_from_joint(_pv_joint(self.ref_bins, transform.apply(self.pts), self.mov_bins, self.bins),
                              self.bins)


@dataclass
class RegistrationResult:
    transforms: list[AffineTransform2D]
    warped: np.ndarray
    warnings: list[bool]
    mi_before: list[float]
    mi_after: list[float]


#: initial and final compass step per parameter (t_row, t_col, rot_deg, log_sy, log_sx, shear)
_STEP0 = np.array([2.0, 2.0, 1.0, 0.02, 0.02, 0.02])
_STEP_MIN = np.array([0.02, 0.02, 0.005, 2e-4, 2e-4, 2e-4])


def _pyramid(img, levels):
    out = [np.asarray(img, float)]
    for _ in range(levels - 1):
        out.append(block_mean(out[-1], (2, 2)))
    return out[::-1]


def register_pair(reference, moving, bins: int = 64, levels: int = 3, max_evals: int = 600,
                  affine: bool = True) -> tuple[AffineTransform2D, bool]:
    """Affine transform maximising MI(reference, moving∘T). Returns ``(T, warning)``.

    Compass search over a coarse-to-fine pyramid; a move is kept only if it
    strictly improves MI. ``warning`` is True when no level improved on the
    identity, in which case the identity is returned.
    """
    ref_pyr = _pyramid(reference, levels)
    mov_pyr = _pyramid(moving, levels)
    vr = (min(np.min(reference), np.min(moving)), max(np.max(reference), np.max(moving)))
    n_par = 6 if affine else 2
    params = np.zeros(6)
    improved_any = False
    for lvl, (ref, mov) in enumerate(zip(ref_pyr, mov_pyr)):
        f = 2 ** (levels - 1 - lvl)
        center = ((ref.shape[0] - 1) / 2, (ref.shape[1] - 1) / 2)

        def to_level(p):
            q = p.copy()
            q[:2] /= f
            return q

        objective = _JitteredMI(ref, mov, bins, vr)

        def score(p):
            return objective(AffineTransform2D.from_params(to_level(p), center))

        best = score(params)
        # steps are in full-resolution units; translations scale with the pyramid factor
        scale = np.array([f, f, 1, 1, 1, 1], float)
        step = _STEP0 * scale
        step_min = _STEP_MIN * scale * (1.0 if lvl == levels - 1 else 4.0)
        evals = 0
        while evals < max_evals and np.any(step[:n_par] >= step_min[:n_par]):
            moved = False
            for i in range(n_par):
                if step[i] < step_min[i]:
                    continue
                for sgn in (1.0, -1.0):
                    trial = params.copy()
                    trial[i] += sgn * step[i]
                    s = score(trial)
                    evals += 1
                    if s > best:
                        best, params, moved = s, trial, True
                        improved_any = True
                        break
            if not moved:
                step /= 2.0
    t = AffineTransform2D.from_params(params, ((reference.shape[0] - 1) / 2, (reference.shape[1] - 1) / 2))
    # acceptance: the warped frame must not share less information with the reference than the original
    mi0 = mutual_information(reference, moving, None, bins, vr)
    mi1 = mutual_information(reference, warp(moving, t), None, bins, vr)
    if not improved_any or mi1 < mi0:
        return AffineTransform2D.identity(), True
    return t, False


def register_stack(frames, reference_index: int = 0, bins: int = 64, levels: int = 3,
                   affine: bool = True) -> RegistrationResult:
    """Register every frame to ``frames[reference_index]``; the reference maps to the identity."""
    frames = np.asarray(frames, float)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ValueError("frames must be a non-empty (n, H, W) array")
    ref = frames[reference_index]
    transforms, warped, warns, before, after = [], [], [], [], []
    for i, fr in enumerate(frames):
        vr = (min(ref.min(), fr.min()), max(ref.max(), fr.max()))
        if i == reference_index:
            t, warn = AffineTransform2D.identity(), False
        else:
            t, warn = register_pair(ref, fr, bins, levels, affine=affine)
        w = warp(fr, t)
        transforms.append(t)
        warns.append(warn)
        warped.append(w)
        before.append(mutual_information(ref, fr, None, bins, vr))
        after.append(mutual_information(ref, w, None, bins, vr))
    return RegistrationResult(transforms, np.stack(warped), warns, before, after)
