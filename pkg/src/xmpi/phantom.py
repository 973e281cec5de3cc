"""Analytic 4D droplet-collision phantoms.

Units: positions and radii in µm, velocities in m/s (= µm/µs), times in ns,
absorption coefficients in 1/µm.

The coalescence model is kinematic, not hydrodynamic. Droplets fly
ballistically until their surfaces touch. Afterwards the pair is described
by a smooth union of two spheres whose centre separation decays
exponentially towards zero, with a common radius scale solved at every
instant so that the enclosed volume equals the initial total volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .geometry import linear_attenuation

#: v [m/s] * t [ns] -> displacement [µm]
UM_PER_NS_PER_MPS = 1e-3


class CapacityError(MemoryError):
    """Requested grid would exceed the configured memory bound."""


class KinematicsError(ValueError):
    pass


def water_mu(energy: float = 10.0) -> float:
    """Linear attenuation of water in 1/µm."""
    return linear_attenuation("water", energy) * 1e-4


@dataclass(frozen=True)
class FluidProperties:
    density: float = 998.0  # kg/m³
    surface_tension: float = 0.072  # N/m


@dataclass(frozen=True)
class DropletState:
    center: tuple[float, float, float]
    radius: float
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"droplet radius must be > 0, got {self.radius}")

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center, float) + np.asarray(self.velocity, float) * t * UM_PER_NS_PER_MPS


def _ramp(sdf: np.ndarray, width: float) -> np.ndarray:
    # linear partial-volume profile, total width `width`, centred on the surface
    return np.clip(0.5 - sdf / width, 0.0, 1.0)


def _smooth_min(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b + (a - b) * h - k * h * (1.0 - h)


@dataclass(frozen=True)
class CollisionPhantom:
    droplets: tuple[DropletState, ...]
    mu_water: float = field(default_factory=water_mu)
    merge_smoothness: float = 3.0
    coalescence_time_constant: float = 20.0  # µs
    boundary_width: float = 3.2
    fluid: FluidProperties = FluidProperties()
    time_window: tuple[float, float] = (0.0, 128 * 886.0)

    def __post_init__(self):
        if self.mu_water < 0:
            raise ValueError("mu_water must be >= 0")
        if not self.merge_smoothness > 0:
            raise ValueError("merge_smoothness must be > 0")
        if not self.boundary_width > 0:
            raise ValueError("boundary_width must be > 0")
        if not 1 <= len(self.droplets) <= 2:
            raise ValueError("a collision phantom holds one or two droplets")

    # -- contact and coalescence state -------------------------------------

    @property
    def total_volume(self) -> float:
        return sum(4.0 / 3.0 * math.pi * d.radius**3 for d in self.droplets)

    def contact_time(self) -> float:
        """Time (ns) at which the two surfaces first touch; ``inf`` if never."""
        if len(self.droplets) < 2:
            return math.inf
        a, b = self.droplets
        dp = np.asarray(b.center, float) - np.asarray(a.center, float)
        dv = (np.asarray(b.velocity, float) - np.asarray(a.velocity, float)) * UM_PER_NS_PER_MPS
        rsum = a.radius + b.radius
        c = dp @ dp - rsum**2
        if c <= 0:
            return -math.inf
        A = dv @ dv
        B = 2 * dp @ dv
        disc = B * B - 4 * A * c
        if A == 0 or disc < 0 or B >= 0:
            return math.inf
        return (-B - math.sqrt(disc)) / (2 * A)

    def _merged_frame(self, t: float):
        """Centres and radius scale for the coalescing pair at ``t`` >= contact."""
        a, b = self.droplets
        tc = self.contact_time()
        tc_eval = tc if math.isfinite(tc) else 0.0  # -inf: overlapping from t = 0
        ma, mb = a.radius**3, b.radius**3
        ca, cb = a.center_at(tc_eval), b.center_at(tc_eval)
        va, vb = np.asarray(a.velocity, float), np.asarray(b.velocity, float)
        com0 = (ma * ca + mb * cb) / (ma + mb)
        vcom = (ma * va + mb * vb) / (ma + mb)
        com = com0 + vcom * (t - tc_eval) * UM_PER_NS_PER_MPS
        axis = cb - ca
        sep0 = float(np.linalg.norm(axis))
        axis = axis / sep0
        tau = self.coalescence_time_constant * 1e3
        sep = sep0 * math.exp(-max(t - tc_eval, 0.0) / tau)
        lam = _volume_scale(a.radius, b.radius, sep, self.merge_smoothness)
        # keep the centre of mass fixed along the axis
        pa = com - axis * sep * mb / (ma + mb)
        pb = com + axis * sep * ma / (ma + mb)
        return pa, pb, lam

    # -- evaluation -----------------------------------------------------------

    def signed_distance(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, float)
        if len(self.droplets) == 1:
            d = self.droplets[0]
            return np.linalg.norm(x - d.center_at(t), axis=-1) - d.radius
        a, b = self.droplets
        if t < self.contact_time():
            da = np.linalg.norm(x - a.center_at(t), axis=-1) - a.radius
            db = np.linalg.norm(x - b.center_at(t), axis=-1) - b.radius
            return np.minimum(da, db)
        pa, pb, lam = self._merged_frame(t)
        da = np.linalg.norm(x - pa, axis=-1) - lam * a.radius
        db = np.linalg.norm(x - pb, axis=-1) - lam * b.radius
        return _smooth_min(da, db, self.merge_smoothness)

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        return droplet_field(self, x, t)

    def support(self, t: float) -> list[tuple[np.ndarray, float]]:
        """Bounding spheres (centre, radius) covering the non-zero region at ``t``."""
        pad = self.merge_smoothness + self.boundary_width
        if len(self.droplets) == 2 and t >= self.contact_time():
            pa, pb, lam = self._merged_frame(t)
            c = (pa + pb) / 2
            r = float(np.linalg.norm(pb - pa)) / 2 + lam * max(d.radius for d in self.droplets)
            return [(c, r + pad)]
        return [(d.center_at(t), d.radius + pad) for d in self.droplets]


@lru_cache(maxsize=4096)
def _volume_scale(ra: float, rb: float, sep: float, k: float) -> float:
    """Radius scale so the smooth union of two spheres encloses ``Va + Vb``."""
    target = 4.0 / 3.0 * math.pi * (ra**3 + rb**3)
    rmax = max(ra, rb)
    # axisymmetric quadrature on (z, r) half-plane, z along the centre axis
    h = rmax / 80.0
    zs = np.arange(-sep - 2 * rmax, sep + 2 * rmax, h) + h / 2
    rs = np.arange(0.0, 2 * rmax, h) + h / 2
    Z, R = np.meshgrid(zs, rs, indexing="ij")
    za = -sep * rb**3 / (ra**3 + rb**3)
    zb = za + sep
    dist_a = np.hypot(Z - za, R)
    dist_b = np.hypot(Z - zb, R)
    weight = 2 * math.pi * R * h * h

    def volume(lam):
        d = _smooth_min(dist_a - lam * ra, dist_b - lam * rb, k)
        return float((np.clip(0.5 - d / h, 0.0, 1.0) * weight).sum())

    return brentq(lambda lam: volume(lam) - target, 0.5, 1.5, xtol=1e-9)


def droplet_field(phantom: CollisionPhantom, x: np.ndarray, t: float) -> np.ndarray:
    """Absorption coefficient µ (1/µm) at points ``x`` (..., 3) and time ``t`` (ns)."""
    return phantom.mu_water * _ramp(phantom.signed_distance(x, t), phantom.boundary_width)


def collision_kinematics(phantom: CollisionPhantom, pulse_period: float = 886.0) -> dict:
    """Weber number, impact parameter and per-frame relative displacement (µm)."""
    if len(phantom.droplets) != 2:
        raise KinematicsError("collision kinematics need exactly two droplets")
    a, b = phantom.droplets
    v_rel = np.asarray(b.velocity, float) - np.asarray(a.velocity, float)
    speed = float(np.linalg.norm(v_rel))
    if speed == 0.0:
        raise KinematicsError("zero relative speed: impact parameter undefined")
    dp = np.asarray(b.center, float) - np.asarray(a.center, float)
    if dp @ v_rel >= 0:
        raise KinematicsError("droplets are not approaching")
    mean_d = a.radius + b.radius  # mean diameter (µm)
    perp = float(np.linalg.norm(np.cross(dp, v_rel / speed)))
    fl = phantom.fluid
    weber = fl.density * speed**2 * mean_d * 1e-6 / fl.surface_tension
    return {
        "weber": weber,
        "impact_parameter": perp / mean_d,
        "relative_speed": speed,
        "displacement_per_frame": speed * pulse_period * UM_PER_NS_PER_MPS,
    }


def head_on_phantom(
    diameter: float = 75.0,
    relative_speed: float = 2.4,
    impact_parameter: float = 0.12,
    contact_time: float = 40_000.0,
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0),
    offset_axis: tuple[float, float, float] = (0.0, 1.0, 0.0),
    **kwargs,
) -> CollisionPhantom:
    """Two equal droplets approaching along ``axis``, touching at ``contact_time`` ns.

    The perpendicular centre offset is ``impact_parameter * diameter`` along
    ``offset_axis``; the pair is centred on the origin at contact.
    """
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    off = np.asarray(offset_axis, float)
    off = off - (off @ axis) * axis
    off /= np.linalg.norm(off)
    r = diameter / 2
    b = impact_parameter * diameter
    along = math.sqrt(max(diameter**2 - b**2, 0.0))
    v = relative_speed / 2 * axis
    shift = v * contact_time * UM_PER_NS_PER_MPS
    ca = -axis * along / 2 - off * b / 2 - shift
    cb = axis * along / 2 + off * b / 2 + shift
    return CollisionPhantom(
        droplets=(
            DropletState(tuple(ca), r, tuple(v)),
            DropletState(tuple(cb), r, tuple(-v)),
        ),
        **kwargs,
    )


def sphere_phantom(radius: float = 37.5, center=(0.0, 0.0, 0.0), **kwargs) -> CollisionPhantom:
    return CollisionPhantom(droplets=(DropletState(tuple(center), radius),), **kwargs)


# -- gridded fields ------------------------------------------------------------


@dataclass
class ScalarField4D:
    """µ(x, y, z, t) either as an analytic evaluator or as a gridded array.

    Gridded data is stored as ``(T, Z, Y, X)`` float32 with voxel centres at
    ``origin + index * voxel_pitch`` (µm) and time samples at ``times`` (ns).
    """

    evaluator: Callable | None = None
    data: np.ndarray | None = None
    voxel_pitch: float = 1.0
    times: np.ndarray | None = None
    origin: np.ndarray | None = None
    time_range: tuple[float, float] = (-math.inf, math.inf)
    support_fn: Callable | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.evaluator is None) == (self.data is None):
            raise ValueError("provide exactly one of evaluator or data")
        if self.data is not None:
            if self.data.ndim != 4:
                raise ValueError("gridded data must be 4D (T, Z, Y, X)")
            if self.times is None:
                raise ValueError("gridded field needs explicit times")
            self.times = np.asarray(self.times, float)
            if len(self.times) != self.data.shape[0]:
                raise ValueError("times length must match data.shape[0]")
            if not self.voxel_pitch > 0:
                raise ValueError("voxel_pitch must be > 0")
            if self.origin is None:
                n = np.array(self.data.shape[1:][::-1], float)
                self.origin = -(n - 1) / 2 * self.voxel_pitch  # (x, y, z)
            self.origin = np.asarray(self.origin, float)
            self.time_range = (float(self.times[0]), float(self.times[-1]))

    @classmethod
    def from_phantom(cls, phantom: CollisionPhantom) -> "ScalarField4D":
        return cls(
            evaluator=phantom,
            voxel_pitch=phantom.boundary_width,
            time_range=tuple(phantom.time_window),
            support_fn=phantom.support,
        )

    @property
    def is_gridded(self) -> bool:
        return self.data is not None

    @property
    def frame_period(self) -> float | None:
        if self.times is None or len(self.times) < 2:
            return None
        return float(self.times[1] - self.times[0])

    def check_time(self, t: float):
        lo, hi = self.time_range
        if not lo - 1e-9 <= t <= hi + 1e-9:
            raise ValueError(f"t = {t} ns outside field time range [{lo}, {hi}]")

    def support(self, t: float) -> list[tuple[np.ndarray, float]]:
        if self.support_fn is not None:
            return self.support_fn(t)
        if self.is_gridded:
            n = np.array(self.data.shape[1:][::-1], float)
            half = (n - 1) / 2 * self.voxel_pitch
            return [(self.origin + half, float(np.linalg.norm(half)) + self.voxel_pitch)]
        raise ValueError("analytic field without support function")

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        self.check_time(t)
        if not self.is_gridded:
            return self.evaluator(x, t)
        return self._interp(np.asarray(x, float), t)

    def _interp(self, x, t):
        from scipy.ndimage import map_coordinates

        ts = self.times
        if len(ts) == 1:
            i0, w = 0, 0.0
        else:
            i0 = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
            w = (t - ts[i0]) / (ts[i0 + 1] - ts[i0])
        idx = (x - self.origin) / self.voxel_pitch  # (..., 3) as (x, y, z)
        coords = idx[..., ::-1].reshape(-1, 3).T  # (z, y, x)

        def sample(k):
            return map_coordinates(self.data[k], coords, order=1, mode="constant", cval=0.0)

        out = sample(i0)
        if w > 0:
            out = (1 - w) * out + w * sample(i0 + 1)
        return out.reshape(x.shape[:-1])


def voxel_centers(n: int, pitch: float) -> np.ndarray:
    return (np.arange(n) - (n - 1) / 2) * pitch


def rasterize_phantom(
    phantom: CollisionPhantom,
    grid_size: int,
    voxel_pitch: float,
    times,
    max_bytes: int = 2 * 1024**3,
) -> ScalarField4D:
    """Sample the phantom at voxel centres of an ``N³`` grid centred on the origin."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    times = np.asarray(times, float)
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be sorted")
    need = grid_size**3 * len(times) * 4
    if need > max_bytes:
        raise CapacityError(f"rasterizing needs {need} bytes, above the {max_bytes} byte bound")
    c = voxel_centers(grid_size, voxel_pitch)
    Z, Y, X = np.meshgrid(c, c, c, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1)
    data = np.empty((len(times), grid_size, grid_size, grid_size), np.float32)
    for i, t in enumerate(times):
        data[i] = droplet_field(phantom, pts, float(t))
    pitch_frame = float(times[1] - times[0]) if len(times) > 1 else None
    return ScalarField4D(
        data=data,
        voxel_pitch=voxel_pitch,
        times=times,
        metadata={"source": "rasterize_phantom", "frame_period_ns": pitch_frame},
    )
