"""Crystal beam-splitter geometry and pulse-averaged flux factors.

Coordinates: the direct beam travels along +z, y is vertical and the
diffraction plane of every splitter is the horizontal x-z plane. A Laue
splitter with deflection angle 2θ sends its beamlet along
``(sin 2θ, 0, cos 2θ)``.

Lengths in the config are given in the units used by the experiment
(Å for lattice constants, m for flight paths, µm for pixels); the detector
frames returned here are in µm so they can be used directly with the
phantoms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: hc in keV·Å
HC_KEV_ANGSTROM = 12.3984

#: density of dry air at standard conditions, g/cm³
RHO_AIR = 1.205e-3
RHO_WATER = 1.0

DIAMOND_LATTICE_CONSTANT = 3.567

# NIST XCOM total mass attenuation (with coherent scattering), cm²/g.
# Energies in keV.
_TABLE_ENERGY = np.array([4.0, 5.0, 6.0, 8.0, 10.0, 15.0, 20.0, 30.0])
MASS_ATTENUATION = {
    "air": np.array([7.788e01, 4.027e01, 2.341e01, 9.921e00, 5.120e00, 1.614e00, 7.779e-01, 3.538e-01]),
    "water": np.array([8.376e01, 4.258e01, 2.464e01, 1.037e01, 5.329e00, 1.673e00, 8.096e-01, 3.756e-01]),
}


class GeometryError(ValueError):
    """Raised for physically inaccessible or out-of-range geometry requests."""


@dataclass(frozen=True)
class CrystalReflection:
    lattice_constant: float = DIAMOND_LATTICE_CONSTANT
    hkl: tuple[int, int, int] = (1, 1, 1)
    geometry_tag: str = "symmetric-Laue"
    polarization: str = "pi"
    efficiency: float = 1.0

    def __post_init__(self):
        if not self.lattice_constant > 0:
            raise GeometryError(f"lattice_constant must be > 0, got {self.lattice_constant}")
        if tuple(self.hkl) == (0, 0, 0):
            raise GeometryError("hkl must not be (0, 0, 0)")
        if self.geometry_tag not in ("symmetric-Laue", "symmetric-Bragg"):
            raise GeometryError(f"unknown geometry_tag {self.geometry_tag!r}")
        if self.polarization not in ("sigma", "pi"):
            raise GeometryError(f"polarization must be 'sigma' or 'pi', got {self.polarization!r}")
        if not 0 < self.efficiency <= 1:
            raise GeometryError(f"efficiency must be in (0, 1], got {self.efficiency}")
        object.__setattr__(self, "hkl", tuple(int(i) for i in self.hkl))

    @property
    def d_spacing(self) -> float:
        """Interplanar spacing in Å for a cubic lattice."""
        h, k, l = self.hkl
        return self.lattice_constant / math.sqrt(h * h + k * k + l * l)

    @property
    def label(self) -> str:
        return "C(" + "".join(str(i) for i in self.hkl) + ")"


@dataclass(frozen=True)
class BeamlineConfig:
    photon_energy: float = 10.0
    splitters: tuple[CrystalReflection, ...] = (
        CrystalReflection(hkl=(1, 1, 1), efficiency=0.8),
        CrystalReflection(hkl=(2, 2, 0), efficiency=0.5),
    )
    sample_to_detector: tuple[float, ...] = (0.5, 0.5)
    air_path: float = 2.0
    pixel_pitch: tuple[float, ...] = (3.2, 6.4)
    pulse_period: float = 886.0
    camera_frame_period: float = 890.0
    frames_per_train: int = 128

    def __post_init__(self):
        if not self.photon_energy > 0:
            raise GeometryError(f"photon_energy must be > 0, got {self.photon_energy}")
        if not self.pulse_period > 0:
            raise GeometryError(f"pulse_period must be > 0, got {self.pulse_period}")
        if not self.camera_frame_period > 0:
            raise GeometryError(f"camera_frame_period must be > 0, got {self.camera_frame_period}")
        if self.frames_per_train < 1:
            raise GeometryError(f"frames_per_train must be >= 1, got {self.frames_per_train}")
        if self.air_path < 0:
            raise GeometryError(f"air_path must be >= 0, got {self.air_path}")
        n = len(self.splitters)
        if len(self.sample_to_detector) != n or len(self.pixel_pitch) != n:
            raise GeometryError(
                f"need one sample_to_detector and pixel_pitch per splitter ({n}), got "
                f"{len(self.sample_to_detector)} and {len(self.pixel_pitch)}"
            )
        if any(p <= 0 for p in self.pixel_pitch):
            raise GeometryError("pixel pitches must be > 0")
        if any(d <= 0 for d in self.sample_to_detector):
            raise GeometryError("sample_to_detector distances must be > 0")


@dataclass(frozen=True)
class DetectorFrame:
    """Detector plane: ``origin`` plus in-plane axes ``u`` (horizontal) and ``v`` (vertical), µm."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class BeamletGeometry:
    direction: np.ndarray
    deflection_angle_2theta: float
    flux_factor: float
    detector_frame: DetectorFrame
    label: str = ""
    pixel_pitch: float = 1.0

    @property
    def view_angle(self) -> float:
        """In-plane rotation of the beamlet about the vertical axis, degrees."""
        return math.degrees(math.atan2(self.direction[0], self.direction[2]))


def wavelength_from_energy(energy: float) -> float:
    """Photon wavelength in Å for an energy in keV."""
    if not energy > 0:
        raise GeometryError(f"photon energy must be > 0 keV, got {energy}")
    return HC_KEV_ANGSTROM / energy


def bragg_deflection(refl: CrystalReflection, energy: float) -> float:
    """Full deflection angle 2θ (degrees) of a reflection at ``energy`` keV."""
    lam = wavelength_from_energy(energy)
    d = refl.d_spacing
    s = lam / (2.0 * d)
    if s > 1.0:
        raise GeometryError(
            f"reflection {refl.hkl} inaccessible: wavelength {lam:.5g} Å exceeds 2d = {2 * d:.5g} Å "
            f"(d = {d:.5g} Å)"
        )
    return 2.0 * math.degrees(math.asin(s))


def polarization_factor(two_theta: float, polarization: str) -> float:
    if not 0.0 <= two_theta <= 180.0:
        raise GeometryError(f"2θ must lie in [0, 180] degrees, got {two_theta}")
    if polarization == "sigma":
        return 1.0
    if polarization == "pi":
        return math.cos(math.radians(two_theta)) ** 2
    raise GeometryError(f"polarization must be 'sigma' or 'pi', got {polarization!r}")


def mass_attenuation(material: str, energy: float) -> float:
    """Mass attenuation coefficient µ/ρ in cm²/g, log-log interpolated."""
    try:
        table = MASS_ATTENUATION[material]
    except KeyError:
        raise GeometryError(f"no attenuation table for {material!r}") from None
    lo, hi = _TABLE_ENERGY[0], _TABLE_ENERGY[-1]
    if not lo <= energy <= hi:
        raise GeometryError(f"energy {energy} keV outside attenuation table range [{lo}, {hi}] keV")
    return float(np.exp(np.interp(np.log(energy), np.log(_TABLE_ENERGY), np.log(table))))


def linear_attenuation(material: str, energy: float, density: float | None = None) -> float:
    """Linear attenuation coefficient in 1/cm."""
    if density is None:
        density = {"air": RHO_AIR, "water": RHO_WATER}[material]
    return mass_attenuation(material, energy) * density


def air_transmission(path: float, energy: float, mu_over_rho: dict | None = None) -> float:
    """Fraction of fluence surviving ``path`` metres of air.

    ``mu_over_rho`` optionally replaces the embedded table with
    ``{"energy": [...], "mu_over_rho": [...]}`` (keV, cm²/g).
    """
    if path < 0:
        raise GeometryError(f"air path must be >= 0, got {path}")
    if mu_over_rho is None:
        mr = mass_attenuation("air", energy)
    else:
        e = np.asarray(mu_over_rho["energy"], dtype=float)
        v = np.asarray(mu_over_rho["mu_over_rho"], dtype=float)
        if not e[0] <= energy <= e[-1]:
            raise GeometryError(f"energy {energy} keV outside table range [{e[0]}, {e[-1]}] keV")
        mr = float(np.exp(np.interp(np.log(energy), np.log(e), np.log(v))))
    return math.exp(-mr * RHO_AIR * path * 100.0)


def rotation_about_vertical(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def beam_frame(view_angle: float, distance_um: float = 0.0) -> DetectorFrame:
    """Detector frame perpendicular to a beam rotated ``view_angle`` degrees in the horizontal plane."""
    R = rotation_about_vertical(view_angle)
    direction = R @ np.array([0.0, 0.0, 1.0])
    u = R @ np.array([1.0, 0.0, 0.0])
    v = np.array([0.0, 1.0, 0.0])
    return DetectorFrame(origin=direction * distance_um, u=u, v=v)


def beamlet_geometry(config: BeamlineConfig) -> list[BeamletGeometry]:
    """One :class:`BeamletGeometry` per splitter, all intersecting at the sample origin."""
    t_air = air_transmission(config.air_path, config.photon_energy)
    out = []
    for refl, dist, pitch in zip(config.splitters, config.sample_to_detector, config.pixel_pitch):
        two_theta = bragg_deflection(refl, config.photon_energy)
        frame = beam_frame(two_theta, dist * 1e6)
        direction = frame.origin / np.linalg.norm(frame.origin)
        flux = polarization_factor(two_theta, refl.polarization) * t_air * refl.efficiency
        out.append(
            BeamletGeometry(
                direction=direction,
                deflection_angle_2theta=two_theta,
                flux_factor=flux,
                detector_frame=frame,
                label=refl.label,
                pixel_pitch=pitch,
            )
        )
    return out
