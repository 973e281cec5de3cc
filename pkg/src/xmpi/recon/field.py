"""Implicit 4D absorption field (x, y, z, t) -> µ and its differentiable projector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.encoding import encode_coordinates
from ..autodiff.nn import MLPSpec, Network, build_network, network_forward
from ..autodiff.tensor import Tensor, parameter


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    """World (µm, ns) <-> [-1, 1]^4. A single spatial scale keeps the metric isotropic.

    The trained time range maps onto [-1/2, 1/2]. The Fourier features of
    the encoding have period 2, so a map onto the full [-1, 1] would give the
    first and last frames identical encodings; on the half range the lowest
    ``sin`` term is monotonic and every time point is distinct.
    """

    center: tuple[float, float, float]
    scale: float
    t_range: tuple[float, float]

    def space(self, pts: np.ndarray) -> np.ndarray:
        return (pts - np.asarray(self.center, pts.dtype)) / self.scale

    def time(self, t) -> np.ndarray:
        t0, t1 = self.t_range
        t = np.asarray(t, float)
        if t1 == t0:
            return np.zeros_like(t)
        return (t - t0) / (t1 - t0) - 0.5

    def check_time(self, t):
        t0, t1 = self.t_range
        tt = np.atleast_1d(np.asarray(t, float))
        tol = 1e-6 * max(abs(t1 - t0), 1.0)
        if np.any(tt < t0 - tol) or np.any(tt > t1 + tol):
            raise RangeError(f"t outside the trained time range [{t0}, {t1}] ns")


class ImplicitField:
    """Coordinate MLP conditioned on a learned per-sequence latent code.

    ``µ = mu_scale * softplus(gain * trunk(PE(x), PE(t), latent))`` in 1/µm.
    The output gain speeds up the response of µ to parameter steps without
    changing the optimizer's learning rate.
    """

    def __init__(self, norm: Normalization, half_width: float, half_height: float,
                 spatial_levels: int = 10, time_levels: int = 6, latent_dim: int = 8,
                 n_sequences: int = 1, hidden: int = 128, depth: int = 8,
                 mu_scale: float = 5.33e-4, output_bias: float = -6.0, seed: int = 0,
                 dtype=np.float32, output_gain: float = 1.0):
        self.norm = norm
        self.half_width = float(half_width)
        self.half_height = float(half_height)
        self.spatial_levels = spatial_levels
        self.time_levels = time_levels
        self.latent_dim = latent_dim
        self.mu_scale = float(mu_scale)
        self.output_gain = float(output_gain)
        self.output_bias = float(output_bias)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        in_dim = 6 * spatial_levels + 2 * time_levels + latent_dim
        self.trunk: Network = build_network(
            MLPSpec(in_dim=in_dim, hidden=hidden, depth=depth, output_map="none",
                    output_bias=output_bias / self.output_gain), rng, dtype
        )
        self.latents = parameter(rng.normal(0.0, 0.01, size=(n_sequences, latent_dim)).astype(dtype), "latents")

    # -- parameters -------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return self.trunk.parameters() + [self.latents]

    def state_dict(self) -> dict[str, np.ndarray]:
        d = {f"trunk.{k}": v for k, v in self.trunk.state_dict().items()}
        d["latents"] = self.latents.data.copy()
        return d

    def load_state_dict(self, state):
        self.trunk.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("trunk.")})
        self.latents.data = np.array(state["latents"], dtype=self.dtype)

    def config(self) -> dict:
        s = self.trunk.spec
        return {
            "center": list(self.norm.center), "scale": self.norm.scale, "t_range": list(self.norm.t_range),
            "half_width": self.half_width, "half_height": self.half_height,
            "spatial_levels": self.spatial_levels, "time_levels": self.time_levels,
            "latent_dim": self.latent_dim, "n_sequences": int(self.latents.shape[0]),
            "hidden": s.hidden, "depth": s.depth, "mu_scale": self.mu_scale,
            "output_bias": self.output_bias, "output_gain": self.output_gain, "dtype": self.dtype.name,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ImplicitField":
        norm = Normalization(tuple(cfg["center"]), cfg["scale"], tuple(cfg["t_range"]))
        return cls(norm, cfg["half_width"], cfg["half_height"], cfg["spatial_levels"], cfg["time_levels"],
                   cfg["latent_dim"], cfg["n_sequences"], cfg["hidden"], cfg["depth"], cfg["mu_scale"],
                   cfg["output_bias"], dtype=np.dtype(cfg.get("dtype", "float32")),
                   output_gain=cfg.get("output_gain", 1.0))

    # -- evaluation -------------------------------------------------------------

    def features(self, pts: np.ndarray, t) -> np.ndarray:
        pts = np.asarray(pts, dtype=self.dtype)
        x = self.norm.space(pts)
        tn = np.broadcast_to(self.norm.time(t).astype(self.dtype), (pts.shape[0],))
        return encode_coordinates(x, tn, self.spatial_levels, self.time_levels)

    def __call__(self, pts: np.ndarray, t, seq: int = 0) -> Tensor:
        """µ at world points ``pts`` (n, 3) as a differentiable (n,) tensor."""
        self.norm.check_time(t)
        return self._mu(np.asarray(pts), t, seq)

    def evaluate(self, pts: np.ndarray, t, seq: int = 0, block: int = 16384) -> np.ndarray:
        """Non-differentiable evaluation in fixed-size blocks (results independent of batching)."""
        pts = np.asarray(pts, dtype=self.dtype)
        n = pts.shape[0]
        out = np.empty(n, dtype=self.dtype)
        for s in range(0, n, block):
            chunk = pts[s:s + block]
            m = chunk.shape[0]
            if m < block:
                chunk = np.concatenate([chunk, np.zeros((block - m, 3), self.dtype)])
            out[s:s + m] = self(chunk, t, seq).data[:m]
        return out

    # -- rendering --------------------------------------------------------------

    @property
    def ray_half_length(self) -> float:
        return self.half_width

    def line_integrals(self, origins: np.ndarray, dirs: np.ndarray, t, seq, samples_per_ray: int,
                       rng: np.random.Generator | None = None) -> Tensor:
        """∫µ ds along parallel-beam rays, one per row of ``origins`` / ``dirs``.

        Each origin is the ray's closest approach to the box centre; samples
        span ``±ray_half_length`` about it (stratified when ``rng`` is given,
        midpoints otherwise). ``t`` and ``seq`` are scalars or per-ray arrays.
        """
        n_rays = origins.shape[0]
        n = samples_per_ray
        L = self.ray_half_length
        ds = 2 * L / n
        if rng is None:
            offs = np.broadcast_to(np.arange(n) + 0.5, (n_rays, n))
        else:
            offs = np.arange(n) + rng.random((n_rays, n))
        s = -L + offs * ds
        pts = origins[:, None, :] + s[:, :, None] * dirs[:, None, :]
        t_pts = np.repeat(np.broadcast_to(np.asarray(t, float), (n_rays,)), n)
        self.norm.check_time(t_pts)
        seq = np.asarray(seq)
        seq_pts = int(seq) if seq.ndim == 0 else np.repeat(seq, n)
        mu = self._mu(pts.reshape(-1, 3), t_pts, seq_pts)
        return T.tsum(T.reshape(mu, (n_rays, n)), axis=1) * ds

    def _mu(self, pts, t, seq) -> Tensor:
        feats = T.Tensor(self.features(pts, t))
        m = feats.shape[0]
        if np.ndim(seq) == 0:
            lat = T.broadcast_to(self.latents[int(seq):int(seq) + 1], (m, self.latent_dim))
        else:
            lat = T.getitem(self.latents, np.asarray(seq))
        raw = network_forward(self.trunk, T.concat([feats, lat], axis=1))
        if self.output_gain != 1.0:
            raw = raw * self.output_gain
        return T.reshape(T.softplus(raw), (m,)) * self.mu_scale

    def rays(self, view_angle: float, u, v):
        """Origins and directions of the rays through detector points (u, v) at ``view_angle``."""
        d, eu, ev = view_axes(view_angle)
        u = np.asarray(u, float).ravel()
        v = np.asarray(v, float).ravel()
        c = np.asarray(self.norm.center, float)
        origins = u[:, None] * eu + v[:, None] * ev + (c @ d) * d
        return origins, np.broadcast_to(d, origins.shape)

    def center_uv(self, view_angle: float) -> tuple[float, float]:
        """Detector coordinates of the box centre seen at ``view_angle``."""
        _, eu, ev = view_axes(view_angle)
        c = np.asarray(self.norm.center, float)
        return float(c @ eu), float(c @ ev)

    def render_line_integrals(self, view_angle, t, u, v, samples_per_ray, rng=None, seq=0) -> Tensor:
        o, d = self.rays(view_angle, u, v)
        return self.line_integrals(o, d, t, seq, samples_per_ray, rng)

    def render(self, view_angle, t, u, v, samples_per_ray, rng=None, seq=0) -> Tensor:
        return T.exp(-self.render_line_integrals(view_angle, t, u, v, samples_per_ray, rng, seq))


def view_axes(view_angle: float):
    """Beam direction and detector axes (u horizontal, v vertical) for an in-plane view angle in degrees."""
    a = math.radians(view_angle)
    d = np.array([math.sin(a), 0.0, math.cos(a)])
    eu = np.array([math.cos(a), 0.0, -math.sin(a)])
    ev = np.array([0.0, 1.0, 0.0])
    return d, eu, ev


def render_projection(field: ImplicitField, view_angle: float, t: float, pixel_grid,
                      samples_per_ray: int = 64, rng=None, seq: int = 0) -> Tensor:
    """Predicted transmission image over ``pixel_grid = (u, v)`` (same shape arrays, µm)."""
    field.norm.check_time(t)
    u, v = pixel_grid
    out = field.render(view_angle, t, u, v, samples_per_ray, rng, seq)
    return T.reshape(out, np.shape(u))


def detector_grid(shape, pitch: float, center_uv=(0.0, 0.0)):
    """(u, v) coordinates (µm) of pixel centres for an image of ``shape`` (rows, cols)."""
    h, w = shape
    u = (np.arange(w) - (w - 1) / 2) * pitch + center_uv[0]
    v = (np.arange(h) - (h - 1) / 2) * pitch + center_uv[1]
    uu, vv = np.meshgrid(u, v)
    return uu, vv


def pixel_to_uv(rows, cols, shape, pitch, center_uv=(0.0, 0.0)):
    h, w = shape
    return ((np.asarray(cols) - (w - 1) / 2) * pitch + center_uv[0],
            (np.asarray(rows) - (h - 1) / 2) * pitch + center_uv[1])
