"""Run configuration: a TOML file with six sections validated against a fixed schema.

Every key has a default, so an empty file yields the full default run. Keys
whose default is ``None`` are optional and are omitted when serializing
(TOML has no null).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from ..forward import DetectorModel, ShotModelParams
from ..geometry import BeamlineConfig, CrystalReflection
from ..phantom import CollisionPhantom, head_on_phantom, sphere_phantom, water_mu
from ..preprocess.pipeline import PreprocessConfig
from ..recon.train import TrainConfig

SECTIONS = ("beamline", "phantom", "detector", "preprocess", "train", "io")


class ConfigError(ValueError):
    """Schema violation; ``path`` is the dotted key path (``section.key``)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class Key:
    default: Any
    kind: str  # float, int, bool, str, floats, ints, bools, int3s, pairs
    check: Callable[[Any], bool] | None = None
    expect: str = ""
    choices: tuple | None = None


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _all(pred):
    return lambda xs: all(pred(x) for x in xs)


_TC, _PC = TrainConfig(), PreprocessConfig()

SCHEMA: dict[str, dict[str, Key]] = {
    "beamline": {
        "photon_energy": Key(10.0, "float", _pos, "> 0 keV"),
        "lattice_constant": Key(3.567, "float", _pos, "> 0 Å"),
        "reflections": Key([[1, 1, 1], [2, 2, 0]], "int3s", lambda r: len(r) >= 1 and all(any(h) for h in r),
                           "non-empty list of non-zero hkl triples"),
        "efficiencies": Key([0.8, 0.5], "floats", _all(lambda e: 0 < e <= 1), "values in (0, 1]"),
        "polarization": Key("pi", "str", choices=("sigma", "pi")),
        "geometry_tag": Key("symmetric-Laue", "str", choices=("symmetric-Laue", "symmetric-Bragg")),
        "sample_to_detector": Key([0.5, 0.5], "floats", _all(_pos), "> 0 m"),
        "air_path": Key(2.0, "float", _nonneg, ">= 0 m"),
        "pixel_pitch": Key([3.2, 6.4], "floats", _all(_pos), "> 0 µm"),
        "pulse_period": Key(886.0, "float", _pos, "> 0 ns"),
        "camera_frame_period": Key(890.0, "float", _pos, "> 0 ns"),
        "frames_per_train": Key(128, "int", lambda n: n >= 2, ">= 2"),
        "camera_lead": Key(600.0, "float", _nonneg, ">= 0 ns"),
        "exposure": Key(880.0, "float", _pos, "> 0 ns"),
        "intensity_shape": Key(25.0, "float", _pos, "> 0"),
        "spectral_shape": Key(50.0, "float", _pos, "> 0"),
        "jitter_sigma": Key(15.0, "float", _nonneg, ">= 0 µm"),
        "multi_peak_probability": Key(0.02, "float", lambda p: 0 <= p <= 1, "in [0, 1]"),
        "n_illumination_modes": Key(3, "int", _nonneg, ">= 0"),
        "illumination_sigma": Key(0.04, "float", _nonneg, ">= 0"),
    },
    "phantom": {
        "kind": Key("collision", "str", choices=("collision", "sphere")),
        "diameter": Key(75.0, "float", _pos, "> 0 µm"),
        "relative_speed": Key(2.4, "float", _nonneg, ">= 0 m/s"),
        "impact_parameter": Key(0.12, "float", lambda b: 0 <= b < 1, "in [0, 1)"),
        "contact_time": Key(40_000.0, "float", None, "ns"),
        "mu": Key(None, "float", _nonneg, ">= 0 1/µm (default: water at the photon energy)"),
        "boundary_width": Key(3.2, "float", _pos, "> 0 µm"),
        "merge_smoothness": Key(3.0, "float", _pos, "> 0 µm"),
        "coalescence_time_constant": Key(20.0, "float", _pos, "> 0 µs"),
    },
    "detector": {
        "pixels": Key([250, 400], "ints", lambda p: len(p) == 2 and min(p) >= 1, "[rows, cols] >= 1"),
        "read_noise_sigma": Key(3.0, "float", _nonneg, ">= 0"),
        "photon_scale": Key(4000.0, "float", _nonneg, ">= 0"),
        "dark_level": Key(20.0, "float", _nonneg, ">= 0"),
        "first_frame_noise_fraction": Key(0.5, "float", _nonneg, ">= 0"),
        "shot_noise": Key(True, "bool"),
        "blur_sigma": Key(0.0, "float", _nonneg, ">= 0 px"),
        "n_flats": Key(32, "int", lambda n: n >= 1, ">= 1"),
        "n_darks": Key(8, "int", lambda n: n >= 1, ">= 1"),
    },
    "preprocess": {
        "n_components": Key(_PC.n_components, "int", _nonneg, ">= 0"),
        "downsample": Key(list(_PC.downsample), "ints", lambda d: len(d) == 2 and min(d) >= 1, "[fy, fx] >= 1"),
        "background_percentile": Key(_PC.background_percentile, "float", lambda p: 0 <= p < 100, "in [0, 100)"),
        "subtract_dark": Key(_PC.subtract_dark, "bool"),
        "wavelet_max_shift": Key(_PC.wavelet_max_shift, "int", _nonneg, ">= 0"),
        "tv_weight": Key(_PC.tv_weight, "float", _pos, "> 0"),
        "tv_max_iter": Key(_PC.tv_max_iter, "int", lambda n: n >= 1, ">= 1"),
        "tv_tol": Key(_PC.tv_tol, "float", _pos, "> 0"),
        "register": Key(list(_PC.register), "bools", None),
        "mi_bins": Key(_PC.mi_bins, "int", lambda n: n >= 2, ">= 2"),
        "pyramid_levels": Key(_PC.pyramid_levels, "int", lambda n: n >= 1, ">= 1"),
        "crop_size": Key(_PC.crop_size, "int", lambda n: n >= 8, ">= 8"),
        "roi_centers": Key(None, "pairs", lambda r: len(r) == 2, "two [row, col] pairs"),
        "highpass_sigma": Key(_PC.highpass_sigma, "float", _pos, "> 0"),
        "canny_sigma": Key(_PC.canny_sigma, "float", _pos, "> 0"),
        "canny_quantiles": Key(list(_PC.canny_quantiles), "floats",
                               lambda q: len(q) == 2 and 0 <= q[0] <= q[1] <= 1, "[low, high] in [0, 1]"),
    },
    "train": {
        "batch_size": Key(_TC.batch_size, "int", lambda n: n >= 1, ">= 1"),
        "lr": Key(_TC.lr, "float", _pos, "> 0"),
        "epochs": Key(_TC.epochs, "int", _nonneg, ">= 0"),
        "warmup_epochs": Key(_TC.warmup_epochs, "int", _nonneg, ">= 0"),
        "steps_per_epoch": Key(None, "int", lambda n: n >= 1, ">= 1"),
        "rays_per_view": Key(_TC.rays_per_view, "int", lambda n: n >= 1, ">= 1"),
        "samples_per_ray": Key(_TC.samples_per_ray, "int", lambda n: n >= 1, ">= 1"),
        "patch_size": Key(_TC.patch_size, "int", lambda n: n >= 2, ">= 2"),
        "patches_per_step": Key(None, "int", lambda n: n >= 1, ">= 1"),
        "patch_samples_per_ray": Key(None, "int", lambda n: n >= 1, ">= 1"),
        "query_angle_range": Key(list(_TC.query_angle_range), "floats", lambda r: len(r) == 2 and r[0] < r[1],
                                 "[low, high] degrees"),
        "adversarial_weight": Key(_TC.adversarial_weight, "float", _nonneg, ">= 0"),
        "adversarial_every": Key(_TC.adversarial_every, "int", lambda n: n >= 1, ">= 1"),
        "background_weight": Key(_TC.background_weight, "float", _nonneg, ">= 0"),
        "mask_dilation": Key(_TC.mask_dilation, "int", _nonneg, ">= 0"),
        "hidden": Key(_TC.hidden, "int", lambda n: n >= 1, ">= 1"),
        "depth": Key(_TC.depth, "int", lambda n: n >= 1, ">= 1"),
        "latent_dim": Key(_TC.latent_dim, "int", lambda n: n >= 1, ">= 1"),
        "spatial_levels": Key(_TC.spatial_levels, "int", lambda n: n >= 1, ">= 1"),
        "time_levels": Key(_TC.time_levels, "int", lambda n: n >= 1, ">= 1"),
        "output_bias": Key(_TC.output_bias, "float"),
        "output_gain": Key(_TC.output_gain, "float", _pos, "> 0"),
        "disc_channels": Key(list(_TC.disc_channels), "ints", _all(lambda c: c >= 1), "channel counts >= 1"),
        "max_frames": Key(None, "int", lambda n: n >= 1, ">= 1 (default: every frame)"),
    },
    "io": {
        "seed": Key(0, "int", _nonneg, ">= 0"),
        "extract_n": Key(512, "int", lambda n: n >= 1, ">= 1"),
        "extract_sigma": Key(2.0, "float", _nonneg, ">= 0 voxels"),
        "extract_downsample": Key(4, "int", lambda n: n >= 1, ">= 1"),
        "extract_tile": Key(None, "int", lambda n: n >= 1, ">= 1 z-planes"),
        "extract_max_bytes": Key(1 << 30, "int", lambda n: n >= 1, ">= 1"),
        "extract_every": Key(1, "int", lambda n: n >= 1, ">= 1 (frame stride)"),
        "held_out_angles": Key(None, "floats", None, "degrees (default: bisector of the two views)"),
        "iso_threshold": Key(None, "float", _pos, "> 0 1/µm (default: half the volume maximum)"),
        "mip_axis": Key("z", "str", choices=("x", "y", "z")),
        "export_modes": Key(["mip", "mesh", "montage"], "strs",
                            _all(lambda m: m in ("mip", "mesh", "montage")), "subset of mip, mesh, montage"),
    },
}


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _coerce(path: str, key: Key, value):
    k = key.kind

    def bad(expect):
        raise ConfigError(path, f"expected {expect}, got {value!r}")

    if k == "float":
        if not _is_num(value) or not math.isfinite(value):
            bad("a finite number")
        value = float(value)
    elif k == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            bad("an integer")
    elif k == "bool":
        if not isinstance(value, bool):
            bad("true or false")
    elif k == "str":
        if not isinstance(value, str):
            bad("a string")
    elif k in ("floats", "ints", "bools", "strs"):
        if not isinstance(value, list):
            bad(f"a list ({k})")
        item = {"floats": "float", "ints": "int", "bools": "bool", "strs": "str"}[k]
        value = [_coerce(f"{path}[{i}]", Key(None, item), v) for i, v in enumerate(value)]
    elif k == "int3s":
        if not isinstance(value, list) or not all(isinstance(v, list) and len(v) == 3 for v in value):
            bad("a list of integer triples")
        value = [[_coerce(f"{path}[{i}]", Key(None, "int"), h) for h in v] for i, v in enumerate(value)]
    elif k == "pairs":
        if not isinstance(value, list) or not all(isinstance(v, list) and len(v) == 2 for v in value):
            bad("a list of [row, col] pairs")
        value = [[_coerce(f"{path}[{i}]", Key(None, "float"), x) for x in v] for i, v in enumerate(value)]
    if key.choices is not None and value not in key.choices:
        raise ConfigError(path, f"expected one of {', '.join(map(str, key.choices))}, got {value!r}")
    if key.check is not None and not key.check(value):
        raise ConfigError(path, f"expected {key.expect}, got {value!r}")
    return value


def defaults() -> dict:
    return {s: {k: copy.deepcopy(v.default) for k, v in SCHEMA[s].items()} for s in SECTIONS}


def validate(raw: dict) -> "RunConfig":
    """Merge ``raw`` (nested dict) into the defaults, checking every key."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a table of sections")
    out = defaults()
    for sec, body in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(sec, f"unknown section (expected one of {', '.join(SECTIONS)})")
        if not isinstance(body, dict):
            raise ConfigError(sec, "expected a table")
        for key, value in body.items():
            path = f"{sec}.{key}"
            if key not in SCHEMA[sec]:
                raise ConfigError(path, "unknown key")
            out[sec][key] = _coerce(path, SCHEMA[sec][key], value)
    _cross_checks(out)
    return RunConfig(out)


def _cross_checks(c: dict):
    b = c["beamline"]
    n = len(b["reflections"])
    for key in ("efficiencies", "sample_to_detector", "pixel_pitch"):
        if len(b[key]) != n:
            raise ConfigError(f"beamline.{key}", f"expected {n} values (one per reflection), got {len(b[key])}")
    io = c["io"]
    if io["extract_n"] % io["extract_downsample"]:
        raise ConfigError("io.extract_n", "expected a multiple of io.extract_downsample")
    if io["extract_tile"] is not None and io["extract_tile"] % io["extract_downsample"]:
        raise ConfigError("io.extract_tile", "expected a multiple of io.extract_downsample")


def parse_config(path=None) -> "RunConfig":
    """Read and validate a TOML config; ``None`` gives the defaults."""
    if path is None:
        return validate({})
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(str(p), f"not valid TOML ({e})") from None
    return validate(raw)


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value`` with a TOML-literal value (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    lhs, rhs = text.split("=", 1)
    parts = lhs.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(lhs.strip(), "override key must be section.key")
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return parts[0], parts[1], value


class RunConfig:
    """Validated configuration plus builders for the library objects it describes."""

    def __init__(self, data: dict):
        self.data = data

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.data == other.data

    def to_dict(self, drop_none: bool = True) -> dict:
        if not drop_none:
            return copy.deepcopy(self.data)
        return {s: {k: copy.deepcopy(v) for k, v in body.items() if v is not None} for s, body in self.data.items()}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def with_overrides(self, overrides) -> "RunConfig":
        raw = self.to_dict()
        for text in overrides:
            sec, key, value = parse_override(text)
            raw.setdefault(sec, {})[key] = value
        return validate(raw)

    # -- builders ------------------------------------------------------------

    def beamline_config(self) -> BeamlineConfig:
        b = self.data["beamline"]
        refl = tuple(
            CrystalReflection(b["lattice_constant"], tuple(h), b["geometry_tag"], b["polarization"], e)
            for h, e in zip(b["reflections"], b["efficiencies"])
        )
        return BeamlineConfig(b["photon_energy"], refl, tuple(b["sample_to_detector"]), b["air_path"],
                              tuple(b["pixel_pitch"]), b["pulse_period"], b["camera_frame_period"],
                              b["frames_per_train"])

    def shot_params(self) -> ShotModelParams:
        b = self.data["beamline"]
        return ShotModelParams(
            n_beamlets=len(b["reflections"]), intensity_shape=b["intensity_shape"],
            spectral_shape=b["spectral_shape"], jitter_sigma=b["jitter_sigma"],
            multi_peak_probability=b["multi_peak_probability"], n_illumination_modes=b["n_illumination_modes"],
            illumination_sigma=b["illumination_sigma"], pulse_period=b["pulse_period"],
        )

    def detectors(self) -> list[DetectorModel]:
        d = self.data["detector"]
        return [
            DetectorModel(tuple(d["pixels"]), p, d["read_noise_sigma"], d["photon_scale"], d["dark_level"],
                          d["first_frame_noise_fraction"], d["shot_noise"], d["blur_sigma"])
            for p in self.data["beamline"]["pixel_pitch"]
        ]

    def mu(self) -> float:
        m = self.data["phantom"]["mu"]
        return water_mu(self.data["beamline"]["photon_energy"]) if m is None else m

    def phantom(self) -> CollisionPhantom:
        p, b = self.data["phantom"], self.data["beamline"]
        window = (0.0, b["frames_per_train"] * b["pulse_period"])
        kw = dict(mu_water=self.mu(), merge_smoothness=p["merge_smoothness"],
                  coalescence_time_constant=p["coalescence_time_constant"], boundary_width=p["boundary_width"],
                  time_window=window)
        if p["kind"] == "sphere":
            return sphere_phantom(p["diameter"] / 2, **kw)
        return head_on_phantom(p["diameter"], p["relative_speed"], p["impact_parameter"], p["contact_time"], **kw)

    def preprocess_config(self) -> PreprocessConfig:
        p = dict(self.data["preprocess"])
        p["downsample"] = tuple(p["downsample"])
        p["register"] = tuple(p["register"])
        p["canny_quantiles"] = tuple(p["canny_quantiles"])
        if p["roi_centers"] is not None:
            p["roi_centers"] = tuple(tuple(c) for c in p["roi_centers"])
        return PreprocessConfig(**p)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = {k: v for k, v in self.data["train"].items() if k != "max_frames"}
        t["query_angle_range"] = tuple(t["query_angle_range"])
        t["disc_channels"] = tuple(t["disc_channels"])
        t["seed"] = self.data["io"]["seed"] if seed is None else seed
        return TrainConfig(**t)
