"""Per-pulse detector frames for each beamlet.

Image formation is the absorption part of the projection approximation:
``I/I0 = flux * intensity_scale * exp(-∫ µ ds)`` along rays parallel to the
beamlet. Frames are rendered on the detector grid (row index along the
vertical axis ``v``, column index along the horizontal axis ``u``), then
multiplied by a shot-dependent illumination pattern and passed through a
10-bit detector model.

Every stochastic draw is made from a generator seeded by
``(seed, stream, pulse_index, beamlet_id)`` so frames do not depend on the
order in which they are rendered.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import BeamletGeometry, BeamlineConfig, beam_frame, beamlet_geometry
from .phantom import CollisionPhantom, ScalarField4D

FULL_SCALE = 1023

# stream tags for derived RNGs
_SHOTS, _SAMPLE, _FLAT, _DARK, _ILLUM = 11, 12, 13, 14, 15


class ConfigError(ValueError):
    pass


class TimingError(ValueError):
    pass


def frame_rng(seed: int, stream: int, index: int = 0, beamlet: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, int(index), int(beamlet)])


@dataclass(frozen=True)
class ShotRecord:
    pulse_index: int
    timestamp: float
    intensity_scale: tuple[float, ...]
    beam_displacement: tuple[tuple[float, float], ...]
    multi_peak_event: tuple[bool, ...]
    illumination_coeffs: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        if any(s < 0 for s in self.intensity_scale):
            raise ValueError("intensity_scale must be >= 0")

    def to_dict(self) -> dict:
        return {
            "pulse_index": self.pulse_index,
            "timestamp": self.timestamp,
            "intensity_scale": list(self.intensity_scale),
            "beam_displacement": [list(d) for d in self.beam_displacement],
            "multi_peak_event": list(self.multi_peak_event),
            "illumination_coeffs": [list(c) for c in self.illumination_coeffs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShotRecord":
        return cls(
            pulse_index=int(d["pulse_index"]),
            timestamp=float(d["timestamp"]),
            intensity_scale=tuple(float(x) for x in d["intensity_scale"]),
            beam_displacement=tuple(tuple(float(v) for v in x) for x in d["beam_displacement"]),
            multi_peak_event=tuple(bool(x) for x in d["multi_peak_event"]),
            illumination_coeffs=tuple(tuple(float(v) for v in x) for x in d.get("illumination_coeffs", [])),
        )


def null_shot(n_beamlets: int = 1, timestamp: float = 0.0) -> ShotRecord:
    """Unit intensity, no jitter, no ghost."""
    return ShotRecord(0, timestamp, (1.0,) * n_beamlets, ((0.0, 0.0),) * n_beamlets, (False,) * n_beamlets)


@dataclass(frozen=True)
class ShotModelParams:
    n_beamlets: int = 2
    intensity_shape: float = 25.0
    spectral_shape: float = 50.0
    jitter_sigma: float = 15.0
    multi_peak_probability: float = 0.02
    ghost_offset: tuple[float, float] = (25.0, 0.0)
    ghost_fraction: float = 0.35
    n_illumination_modes: int = 3
    illumination_sigma: float = 0.04
    pulse_period: float = 886.0

    def validate(self):
        if self.n_beamlets < 1:
            raise ConfigError("n_beamlets must be >= 1")
        if not self.intensity_shape > 0 or not self.spectral_shape > 0:
            raise ConfigError("gamma shape parameters must be > 0")
        if self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma must be >= 0")
        if not 0 <= self.multi_peak_probability <= 1:
            raise ConfigError("multi_peak_probability must be in [0, 1]")
        if not 0 <= self.ghost_fraction < 1:
            raise ConfigError("ghost_fraction must be in [0, 1)")
        if self.illumination_sigma < 0 or self.n_illumination_modes < 0:
            raise ConfigError("illumination parameters must be >= 0")


def sase_shot_model(rng_seed: int, n_pulses: int, params: ShotModelParams = ShotModelParams(),
                    stream: int = _SHOTS) -> list[ShotRecord]:
    """Shot-to-shot SASE statistics for a train of ``n_pulses``.

    The pulse fluence is gamma distributed with mean 1; each beamlet picks a
    different part of the spiky spectrum, modelled as an independent
    mean-1 gamma factor on top of the common one.
    """
    if n_pulses < 1:
        raise ConfigError("n_pulses must be >= 1")
    params.validate()
    nb = params.n_beamlets
    out = []
    for k in range(n_pulses):
        rng = frame_rng(rng_seed, stream, k)
        common = rng.gamma(params.intensity_shape, 1.0 / params.intensity_shape)
        spectral = rng.gamma(params.spectral_shape, 1.0 / params.spectral_shape, size=nb)
        disp = rng.normal(0.0, 1.0, size=(nb, 2)) * params.jitter_sigma
        ghost = rng.random(nb) < params.multi_peak_probability
        illum = rng.normal(0.0, params.illumination_sigma, size=(nb, params.n_illumination_modes))
        out.append(
            ShotRecord(
                pulse_index=k,
                timestamp=k * params.pulse_period,
                intensity_scale=tuple(float(common * s) for s in spectral),
                beam_displacement=tuple((float(a), float(b)) for a, b in disp),
                multi_peak_event=tuple(bool(g) for g in ghost),
                illumination_coeffs=tuple(tuple(float(c) for c in row) for row in illum),
            )
        )
    return out


@dataclass(frozen=True)
class DetectorModel:
    pixels: tuple[int, int] = (250, 400)
    pixel_pitch: float = 3.2
    read_noise_sigma: float = 3.0
    photon_scale: float = 4000.0
    dark_level: float = 20.0
    first_frame_noise_fraction: float = 0.5
    shot_noise: bool = True
    blur_sigma: float = 0.0

    def __post_init__(self):
        if min(self.pixels) < 1:
            raise ConfigError("detector needs at least one pixel per axis")
        if not self.pixel_pitch > 0:
            raise ConfigError("pixel_pitch must be > 0")
        if self.read_noise_sigma < 0 or self.photon_scale < 0:
            raise ConfigError("noise and photon scale must be >= 0")

    @property
    def noiseless(self) -> "DetectorModel":
        return replace(self, read_noise_sigma=0.0, shot_noise=False, first_frame_noise_fraction=0.0)

    def pixel_coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Detector-plane coordinates (u of columns, v of rows) in µm, centred on the axis."""
        h, w = self.pixels
        u = (np.arange(w) - (w - 1) / 2) * self.pixel_pitch
        v = (np.arange(h) - (h - 1) / 2) * self.pixel_pitch
        return u, v


def _ray_integrals(field: ScalarField4D, direction, eu, ev, uu, vv, t, step, chunk=2_000_000):
    """∫µ ds for rays through detector points (uu, vv); zero where no support is hit."""
    out = np.zeros(uu.shape, float)
    spheres = field.support(t)
    lo = np.full(uu.shape, np.inf)
    hi = np.full(uu.shape, -np.inf)
    for c, r in spheres:
        cu, cv, cs = c @ eu, c @ ev, c @ direction
        rho2 = (uu - cu) ** 2 + (vv - cv) ** 2
        hit = rho2 < r * r
        half = np.sqrt(np.where(hit, r * r - rho2, 0.0))
        lo = np.where(hit, np.minimum(lo, cs - half), lo)
        hi = np.where(hit, np.maximum(hi, cs + half), hi)
    idx = np.flatnonzero(np.isfinite(lo))
    if idx.size == 0:
        return out
    length = hi.ravel()[idx] - lo.ravel()[idx]
    nsteps = np.maximum(np.ceil(length / step).astype(int), 1)
    flat_u, flat_v, flat_lo = uu.ravel(), vv.ravel(), lo.ravel()
    res = out.ravel()
    for n in np.unique(nsteps):
        group = np.flatnonzero(nsteps == n)
        per = max(chunk // n, 1)
        for g0 in range(0, group.size, per):
            g = group[g0:g0 + per]
            sel = idx[g]
            ds = length[g] / n
            s = flat_lo[sel][:, None] + (np.arange(n) + 0.5)[None, :] * ds[:, None]
            pts = (
                flat_u[sel][:, None, None] * eu
                + flat_v[sel][:, None, None] * ev
                + s[:, :, None] * direction
            )
            res[sel] = field(pts, t).sum(axis=1) * ds
    return out


def project_view(
    field: ScalarField4D,
    beamlet: BeamletGeometry,
    detector: DetectorModel,
    t: float,
    shot: ShotRecord | None = None,
    beamlet_id: int = 0,
    step: float | None = None,
    ghost_offset=(25.0, 0.0),
    ghost_fraction: float = 0.35,
) -> np.ndarray:
    """Noiseless normalized intensity ``I/I0`` on the detector grid, shape ``detector.pixels``.

    The jitter displacement of ``shot`` shifts the sample image rigidly in
    the detector plane; a multi-peak event adds a displaced ghost copy.
    """
    field.check_time(t)
    if shot is None:
        shot = null_shot(beamlet_id + 1, t)
    if step is None:
        step = field.voxel_pitch / 2
    elif step > field.voxel_pitch / 2:
        raise ValueError(f"quadrature step {step} exceeds half the voxel pitch {field.voxel_pitch / 2}")
    frame = beamlet.detector_frame
    u, v = detector.pixel_coordinates()
    uu, vv = np.meshgrid(u, v)  # (H, W)
    du, dv = shot.beam_displacement[beamlet_id]
    d = np.asarray(beamlet.direction, float)
    line = _ray_integrals(field, d, frame.u, frame.v, uu - du, vv - dv, t, step)
    img = np.exp(-line)
    if shot.multi_peak_event[beamlet_id]:
        gu, gv = ghost_offset
        ghost = np.exp(-_ray_integrals(field, d, frame.u, frame.v, uu - du - gu, vv - dv - gv, t, step))
        img = (1 - ghost_fraction) * img + ghost_fraction * ghost
    return beamlet.flux_factor * shot.intensity_scale[beamlet_id] * img


def project_points(field: ScalarField4D, view_angle: float, t: float, uu, vv, step: float | None = None) -> np.ndarray:
    """Noiseless transmission ``exp(-∫µ ds)`` for parallel rays at ``view_angle`` through detector points (uu, vv) µm."""
    field.check_time(t)
    if step is None:
        step = field.voxel_pitch / 2
    frame = beam_frame(view_angle, 1.0)
    d = frame.origin / np.linalg.norm(frame.origin)
    uu, vv = np.asarray(uu, float), np.asarray(vv, float)
    return np.exp(-_ray_integrals(field, d, frame.u, frame.v, uu, vv, t, step))


def view_geometry(view_angle: float, flux_factor: float = 1.0, pixel_pitch: float = 1.0) -> BeamletGeometry:
    """Beamlet travelling at ``view_angle`` degrees from +z in the horizontal plane."""
    frame = beam_frame(view_angle, 1.0)
    return BeamletGeometry(
        direction=frame.origin / np.linalg.norm(frame.origin),
        deflection_angle_2theta=view_angle,
        flux_factor=flux_factor,
        detector_frame=frame,
        pixel_pitch=pixel_pitch,
    )


def detector_capture(intensity: np.ndarray, detector: DetectorModel, frame_index: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Quantize a normalized intensity image into 10-bit counts (uint16)."""
    intensity = np.asarray(intensity, float)
    if np.any(intensity < 0):
        raise ValueError("intensity must be >= 0")
    if detector.blur_sigma > 0:
        intensity = gaussian_filter(intensity, detector.blur_sigma)
    expected = detector.photon_scale * intensity
    photons = rng.poisson(expected).astype(float) if detector.shot_noise else expected
    counts = detector.dark_level + photons
    if detector.read_noise_sigma > 0:
        counts = counts + rng.normal(0.0, detector.read_noise_sigma, size=counts.shape)
    if frame_index == 0 and detector.first_frame_noise_fraction > 0:
        counts = counts + rng.uniform(0.0, detector.first_frame_noise_fraction * FULL_SCALE, size=counts.shape)
    return np.round(np.clip(counts, 0, FULL_SCALE)).astype(np.uint16)


@dataclass
class IlluminationModel:
    """Beam footprint times a fixed pattern, plus smooth shot-dependent modes."""

    shape: tuple[int, int]
    footprint_sigma: float = 0.7
    pattern_amplitude: float = 0.04
    seed: int = 0
    n_modes: int = 3

    def __post_init__(self):
        h, w = self.shape
        y = np.linspace(-1, 1, h)[:, None]
        x = np.linspace(-1, 1, w)[None, :]
        base = np.exp(-(x**2 + y**2) / (2 * self.footprint_sigma**2))
        rng = frame_rng(self.seed, _ILLUM)
        pattern = gaussian_filter(rng.normal(size=(h, w)), 3.0)
        pattern /= pattern.std() + 1e-12
        self.base = base * (1 + self.pattern_amplitude * pattern)
        modes = [x + 0 * y, y + 0 * x, np.cos(np.pi * x) * np.cos(np.pi * y), np.sin(2 * np.pi * x) + 0 * y]
        self.modes = [m * self.base for m in modes[: self.n_modes]]

    def pattern(self, coeffs=()) -> np.ndarray:
        out = self.base.copy()
        for c, m in zip(coeffs, self.modes):
            out += c * m
        return np.clip(out, 0.0, None)


@dataclass
class FrameStack:
    """Time-ordered frames of one beamlet with per-frame timing and shot metadata."""

    frames: np.ndarray
    timestamps: np.ndarray
    shot_records: list
    beamlet_id: int = 0
    pixel_pitch: float = 3.2
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise ValueError("frames must be a (n, H, W) array")
        self.timestamps = np.asarray(self.timestamps, float)
        n = self.frames.shape[0]
        if len(self.timestamps) != n or len(self.shot_records) != n:
            raise ValueError(
                f"frames ({n}), timestamps ({len(self.timestamps)}) and shot_records "
                f"({len(self.shot_records)}) must have equal length"
            )

    def __len__(self):
        return self.frames.shape[0]

    def replace_frames(self, frames, **meta) -> "FrameStack":
        md = dict(self.metadata)
        md.update(meta)
        return FrameStack(np.asarray(frames), self.timestamps.copy(), list(self.shot_records),
                          self.beamlet_id, self.pixel_pitch, md)


@dataclass
class Acquisition:
    stacks: list[FrameStack]
    flats: list[FrameStack]
    darks: list[FrameStack]
    beamlets: list[BeamletGeometry]
    detectors: list[DetectorModel]

    @property
    def timing(self) -> dict:
        return self.stacks[0].metadata["timing"]


def default_detectors(config: BeamlineConfig, pixels=(250, 400)) -> list[DetectorModel]:
    return [DetectorModel(pixels=tuple(pixels), pixel_pitch=p) for p in config.pixel_pitch]


def timing_model(config: BeamlineConfig, camera_lead: float = 600.0, exposure: float = 880.0) -> dict:
    """Pulse arrival and camera frame opening times for one train.

    Camera frame ``k`` records pulse ``k``. The camera runs slower than the
    pulse train, so each frame opens ``camera_frame_period - pulse_period``
    later relative to its pulse than the previous one. Frame 0 is unusable.
    """
    n = config.frames_per_train
    k = np.arange(n)
    pulses = k * config.pulse_period
    opens = k * config.camera_frame_period - camera_lead
    drift = opens - opens[0] - (pulses - pulses[0])
    pulse_in_frame = pulses - opens
    usable = k[1:]
    bad = usable[(pulse_in_frame[usable] < 0) | (pulse_in_frame[usable] > exposure)]
    if bad.size:
        raise TimingError(
            f"pulses {bad.tolist()[:5]} fall outside the {exposure} ns exposure window; "
            f"increase camera_lead or exposure"
        )
    return {
        "pulse_times_ns": pulses.tolist(),
        "frame_open_ns": opens.tolist(),
        "drift_ns": drift.tolist(),
        "usable_frames": usable.tolist(),
        "cumulative_drift_ns": float(drift[usable[-1]]) if usable.size else 0.0,
        "camera_lead_ns": camera_lead,
        "exposure_ns": exposure,
    }


def simulate_acquisition(
    phantom: CollisionPhantom | ScalarField4D,
    config: BeamlineConfig,
    seed: int,
    detectors: list[DetectorModel] | None = None,
    shot_params: ShotModelParams | None = None,
    n_flats: int = 32,
    n_darks: int = 8,
    camera_lead: float = 600.0,
    exposure: float = 880.0,
    step: float | None = None,
) -> Acquisition:
    """Render one train for every beamlet plus flat and dark series.

    Returns usable frames only (``frames_per_train - 1`` per beamlet).
    """
    field = phantom if isinstance(phantom, ScalarField4D) else ScalarField4D.from_phantom(phantom)
    beamlets = beamlet_geometry(config)
    if detectors is None:
        detectors = default_detectors(config)
    if len(detectors) != len(beamlets):
        raise ConfigError("need one detector per beamlet")
    if shot_params is None:
        shot_params = ShotModelParams(n_beamlets=len(beamlets), pulse_period=config.pulse_period)
    shot_params = replace(shot_params, n_beamlets=len(beamlets), pulse_period=config.pulse_period)
    timing = timing_model(config, camera_lead, exposure)
    n = config.frames_per_train
    shots = sase_shot_model(seed, n, shot_params)
    flat_shots = sase_shot_model(seed, n_flats, shot_params, stream=_FLAT + 100)
    usable = timing["usable_frames"]

    stacks, flats, darks = [], [], []
    for b, (beam, det) in enumerate(zip(beamlets, detectors)):
        illum = IlluminationModel(det.pixels, seed=seed + 1000 * b, n_modes=shot_params.n_illumination_modes)
        frames = []
        for k in range(n):
            shot = shots[k]
            img = project_view(field, beam, det, shot.timestamp, shot, b, step,
                               shot_params.ghost_offset, shot_params.ghost_fraction)
            img = img * illum.pattern(shot.illumination_coeffs[b])
            frames.append(detector_capture(img, det, k, frame_rng(seed, _SAMPLE, k, b)))
        frames = np.stack(frames)[usable]
        meta = {
            "timing": timing,
            "beamlet_label": beam.label,
            "view_angle_deg": beam.view_angle,
            "flux_factor": beam.flux_factor,
            "provenance": ["simulate"],
        }
        stacks.append(FrameStack(frames, np.array(timing["pulse_times_ns"])[usable],
                                 [shots[k] for k in usable], b, det.pixel_pitch, meta))
        fl = []
        for j, shot in enumerate(flat_shots):
            img = beam.flux_factor * shot.intensity_scale[b] * illum.pattern(shot.illumination_coeffs[b])
            # flats come from the usable part of a train: index offset keeps frame-0 noise out
            fl.append(detector_capture(img, det, j + 1, frame_rng(seed, _FLAT, j, b)))
        flats.append(FrameStack(np.stack(fl), np.array([s.timestamp for s in flat_shots]), flat_shots, b,
                                det.pixel_pitch, {"kind": "flat", "provenance": ["simulate"]}))
        dk = [detector_capture(np.zeros(det.pixels), det, j + 1, frame_rng(seed, _DARK, j, b))
              for j in range(n_darks)]
        dark_shots = [null_shot(len(beamlets), j * config.pulse_period) for j in range(n_darks)]
        darks.append(FrameStack(np.stack(dk), np.arange(n_darks) * config.pulse_period, dark_shots, b,
                                det.pixel_pitch, {"kind": "dark", "provenance": ["simulate"]}))
    return Acquisition(stacks, flats, darks, beamlets, detectors)
