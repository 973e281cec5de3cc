"""Network definitions: coordinate MLP trunk and patch discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, parameter


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class MLPSpec:
    in_dim: int
    hidden: int = 128
    depth: int = 8
    out_dim: int = 1
    slope: float = 0.01
    output_map: str = "softplus"
    zero_output: bool = True
    output_bias: float = 0.0
    kind: str = "mlp"

    def validate(self):
        if self.in_dim < 1 or self.hidden < 1 or self.depth < 1 or self.out_dim < 1:
            raise ArchError(f"MLP dimensions must be >= 1: {self}")
        if self.output_map not in ("softplus", "none"):
            raise ArchError(f"unknown output map {self.output_map!r}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    patch: int = 32
    channels: tuple[int, ...] = (16, 32, 64, 64)
    kernel: int = 4
    in_channels: int = 1
    slope: float = 0.2
    kind: str = "discriminator"

    def validate(self):
        size = self.patch
        for _ in self.channels:
            if size % 2:
                raise ArchError(f"patch size {self.patch} not divisible by 2**{len(self.channels)}")
            size //= 2
        if size < 1:
            raise ArchError("too many stride-2 layers for this patch size")

    @property
    def final_size(self) -> int:
        return self.patch // 2 ** len(self.channels)


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "mlp":
        return MLPSpec(**d)
    if kind == "discriminator":
        d["channels"] = tuple(d["channels"])
        return DiscriminatorSpec(**d)
    raise ArchError(f"unknown network kind {kind!r}")


def _kaiming(rng, fan_in, shape, slope, dtype):
    bound = np.sqrt(6.0 / ((1 + slope**2) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Network:
    """Parameters in a fixed, named order plus the forward rule for ``spec``."""

    def __init__(self, spec, params: dict[str, Tensor]):
        spec.validate()
        self.spec = spec
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ArchError(f"shape mismatch for {k}: {state[k].shape} vs {v.shape}")
            v.data = np.array(state[k], dtype=v.dtype)

    def arch(self) -> dict:
        return asdict(self.spec)

    def __call__(self, x):
        return network_forward(self, x)


def build_network(spec, rng: np.random.Generator, dtype=np.float32) -> Network:
    spec.validate()
    p = {}
    if spec.kind == "mlp":
        fan = spec.in_dim
        for i in range(spec.depth):
            p[f"w{i}"] = parameter(_kaiming(rng, fan, (fan, spec.hidden), spec.slope, dtype), f"w{i}")
            p[f"b{i}"] = parameter(np.zeros(spec.hidden, dtype), f"b{i}")
            fan = spec.hidden
        w_out = np.zeros((fan, spec.out_dim), dtype) if spec.zero_output else \
            _kaiming(rng, fan, (fan, spec.out_dim), 1.0, dtype)
        p["w_out"] = parameter(w_out, "w_out")
        p["b_out"] = parameter(np.full(spec.out_dim, spec.output_bias, dtype), "b_out")
    else:
        cin = spec.in_channels
        k = spec.kernel
        for i, cout in enumerate(spec.channels):
            p[f"conv{i}_w"] = parameter(_kaiming(rng, cin * k * k, (cout, cin, k, k), spec.slope, dtype), f"conv{i}_w")
            p[f"conv{i}_b"] = parameter(np.zeros(cout, dtype), f"conv{i}_b")
            cin = cout
        flat = cin * spec.final_size**2
        p["head_w"] = parameter(_kaiming(rng, flat, (flat, 1), 1.0, dtype), "head_w")
        p["head_b"] = parameter(np.zeros(1, dtype), "head_b")
    return Network(spec, p)


def network_forward(net: Network, inputs) -> Tensor:
    """Deterministic forward pass.

    MLP: ``inputs`` (n, in_dim) -> (n, out_dim), non-negative with the softplus map.
    Discriminator: ``inputs`` (n, patch, patch) or (n, 1, patch, patch) -> (n,) logits.
    """
    spec, p = net.spec, net.params
    x = T.as_tensor(inputs)
    if spec.kind == "mlp":
        if x.ndim != 2 or x.shape[1] != spec.in_dim:
            raise ArchError(f"MLP expects (n, {spec.in_dim}) input, got {x.shape}")
        h = x
        for i in range(spec.depth):
            h = T.leaky_relu(T.linear(h, p[f"w{i}"], p[f"b{i}"]), spec.slope)
        out = T.linear(h, p["w_out"], p["b_out"])
        return T.softplus(out) if spec.output_map == "softplus" else out
    if x.ndim == 3:
        x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.ndim != 4 or x.shape[1] != spec.in_channels or x.shape[2:] != (spec.patch, spec.patch):
        raise ArchError(f"discriminator expects (n, {spec.in_channels}, {spec.patch}, {spec.patch}), got {x.shape}")
    h = x
    for i in range(len(spec.channels)):
        h = T.leaky_relu(T.conv2d(h, p[f"conv{i}_w"], p[f"conv{i}_b"], stride=2, padding=(spec.kernel - 2) // 2),
                         spec.slope)
    h = T.reshape(h, (h.shape[0], -1))
    return T.reshape(T.linear(h, p["head_w"], p["head_b"]), (h.shape[0],))
