"""Two-view training of the implicit field: MSE warmup, then MSE + adversarial patches."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation

from ..autodiff import tensor as T
from ..autodiff.checkpoint import save_checkpoint
from ..autodiff.nn import DiscriminatorSpec, Network, build_network, network_forward
from ..autodiff.optim import Adam
from ..autodiff.tensor import NonFiniteError, Tensor
from .field import ImplicitField, Normalization, view_axes
from .losses import LOG_FLOOR, adversarial_losses, weighted_mse
from .patches import extract_patch, sample_patch_specs


class DivergenceError(RuntimeError):
    """Training produced a non-finite value; ``state`` holds the last good parameters."""

    def __init__(self, msg, state=None, checkpoint=None, epoch=None):
        super().__init__(msg)
        self.state = state
        self.checkpoint = checkpoint
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 6
    lr: float = 1e-4
    epochs: int = 50
    warmup_epochs: int = 5
    #: optimizer steps per epoch; None means one pass over the frames in batches
    steps_per_epoch: int | None = None
    rays_per_view: int = 256
    samples_per_ray: int = 64
    patch_size: int = 32
    #: fake/real patch pairs per step; None means one per frame in the batch
    patches_per_step: int | None = None
    patch_samples_per_ray: int | None = None
    query_angle_range: tuple[float, float] = (-90.0, 90.0)
    adversarial_weight: float = 0.05
    #: adversarial update on every n-th step after warmup (1 = every step)
    adversarial_every: int = 1
    background_weight: float = 0.2
    mask_dilation: int = 3
    hidden: int = 128
    depth: int = 8
    latent_dim: int = 8
    spatial_levels: int = 10
    time_levels: int = 6
    output_bias: float = -6.0
    output_gain: float = 1.0
    disc_channels: tuple[int, ...] = (16, 32, 64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "adversarial_every", "rays_per_view", "samples_per_ray", "patch_size",
                     "hidden", "depth", "latent_dim", "spatial_levels", "time_levels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        lo, hi = self.query_angle_range
        if not lo <= hi:
            raise ValueError("query_angle_range must be (low, high) with low <= high")
        object.__setattr__(self, "disc_channels", tuple(self.disc_channels))
        object.__setattr__(self, "query_angle_range", tuple(self.query_angle_range))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingData:
    """Measured transmission images of one or more sequences on a common grid.

    ``images[s]`` has shape (views, frames, H, W); ``times[s]`` (frames,) ns.
    """

    images: list[np.ndarray]
    times: list[np.ndarray]
    view_angles: tuple[float, ...]
    pixel_pitch: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    weights: list[np.ndarray] | None = None

    @property
    def shape(self):
        return self.images[0].shape[-2:]

    @property
    def frame_index(self) -> list[tuple[int, int]]:
        return [(s, f) for s, im in enumerate(self.images) for f in range(im.shape[1])]


@dataclass
class TrainResult:
    field: ImplicitField
    discriminator: Network
    log: list[dict] = field(default_factory=list)
    epoch_mse: list[float] = field(default_factory=list)
    data: TrainingData | None = None


def _view_angles(stacks, geometry):
    if geometry is None:
        return tuple(float(s.metadata["view_angle_deg"]) for s in stacks)
    out = []
    for g in geometry:
        out.append(float(g.view_angle) if hasattr(g, "view_angle") else float(g))
    return tuple(out)


def solve_center(view_angles, center_uv) -> tuple[float, float, float]:
    """3D point whose projections land on the given per-view detector centres (least squares)."""
    rows, rhs = [], []
    vs = []
    for a, (u, v) in zip(view_angles, center_uv):
        _, eu, _ = view_axes(a)
        rows.append(eu[[0, 2]])
        rhs.append(u)
        vs.append(v)
    xz, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    return float(xz[0]), float(np.mean(vs)), float(xz[1])


def prepare_training_data(stacks, geometry=None, masks=None, config: TrainConfig = TrainConfig()) -> TrainingData:
    """Check and pack harmonized stacks.

    ``stacks`` is a sequence of per-view FrameStacks (one sequence) or a list
    of such sequences trained jointly. ``masks`` optionally gives droplet
    masks with the same nesting; they up-weight the droplet region.
    """
    seqs = [list(stacks)] if not isinstance(stacks[0], (list, tuple)) else [list(s) for s in stacks]
    angles = _view_angles(seqs[0], geometry)
    pitch = float(seqs[0][0].pixel_pitch)
    images, times, weights = [], [], []
    center_uv = None
    for si, seq in enumerate(seqs):
        if len(seq) != len(angles):
            raise ValueError(f"sequence {si} has {len(seq)} views, expected {len(angles)}")
        shapes = {s.frames.shape for s in seq}
        if len(shapes) != 1:
            raise ValueError(f"views of sequence {si} are not on a common grid: {sorted(shapes)}")
        if any(abs(s.pixel_pitch - pitch) > 1e-9 for s in seq):
            raise ValueError("all views must share one pixel pitch; harmonize the stacks first")
        t = seq[0].timestamps
        for s in seq[1:]:
            if not np.allclose(s.timestamps, t, atol=1e-6):
                raise ValueError("view timestamps are not aligned to common pulses")
        images.append(np.stack([np.asarray(s.frames, np.float32) for s in seq]))
        times.append(np.asarray(t, float))
        if si == 0 and all("roi_center_uv_um" in s.metadata for s in seq):
            center_uv = [tuple(s.metadata["roi_center_uv_um"]) for s in seq]
        if masks is not None:
            m = np.stack([np.asarray(mm, bool) for mm in (masks[si] if len(seqs) > 1 else masks)])
            if config.mask_dilation:
                m = np.stack([[binary_dilation(f, iterations=config.mask_dilation) for f in v] for v in m])
            weights.append(np.where(m, 1.0, config.background_weight).astype(np.float32))
    center = solve_center(angles, center_uv) if center_uv else (0.0, 0.0, 0.0)
    return TrainingData(images, times, angles, pitch, center, weights if masks is not None else None)


def build_field(data: TrainingData, config: TrainConfig, mu_scale: float) -> ImplicitField:
    h, w = data.shape
    hw, hh = w * data.pixel_pitch / 2, h * data.pixel_pitch / 2
    t_all = np.concatenate(data.times)
    norm = Normalization(tuple(data.center), 1.001 * max(hw * math.sqrt(2), hh),
                         (float(t_all.min()), float(t_all.max())))
    return ImplicitField(norm, hw, hh, config.spatial_levels, config.time_levels, config.latent_dim,
                         len(data.images), config.hidden, config.depth, mu_scale, config.output_bias,
                         seed=config.seed, output_gain=config.output_gain)


def _attenuation(images) -> np.ndarray:
    return -np.log(np.clip(images, 1e-3, None))


class _Streams:
    """Independent generators per purpose, all derived from one seed."""

    def __init__(self, seed):
        names = ("batches", "rays", "jitter", "patches", "angles")
        for name, ss in zip(names, np.random.SeedSequence(seed).spawn(len(names))):
            setattr(self, name, np.random.default_rng(ss))


def _pixel_uv(data: TrainingData, rows, cols, center_uv):
    h, w = data.shape
    p = data.pixel_pitch
    return (np.asarray(cols) - (w - 1) / 2) * p + center_uv[0], (np.asarray(rows) - (h - 1) / 2) * p + center_uv[1]


def train_reconstruction(stacks, geometry=None, config: TrainConfig = TrainConfig(), masks=None,
                         mu_scale: float = 5.33e-4, log_path=None, checkpoint_path=None,
                         data: TrainingData | None = None, progress=None, clock=time.perf_counter) -> TrainResult:
    """Fit an :class:`ImplicitField` to two (or more) measured views.

    Epochs ``1..warmup_epochs`` minimise the weighted MSE between rendered
    and measured transmission at the measured angles. Later epochs add the
    adversarial term: fake patches are rendered at random in-plane query
    angles and judged against real patches from the measured images. Patches
    are compared as attenuation ``-ln T`` scaled by the largest measured
    attenuation.

    ``clock`` supplies the ``wall_time`` of each log record; pass a constant
    function to get byte-reproducible logs.
    """
    if data is None:
        data = prepare_training_data(stacks, geometry, masks, config)
    fld = build_field(data, config, mu_scale)
    disc = build_network(DiscriminatorSpec(patch=config.patch_size, channels=config.disc_channels),
                         np.random.default_rng(np.random.SeedSequence(config.seed).spawn(6)[5]))
    g_opt = Adam(fld.parameters(), lr=config.lr)
    d_opt = Adam(disc.parameters(), lr=config.lr)
    rs = _Streams(config.seed)
    frames = data.frame_index
    att = [_attenuation(im) for im in data.images]
    att_scale = float(max(np.percentile(a, 99.9) for a in att))
    att_scale = att_scale if att_scale > 1e-6 else 1.0
    h, w = data.shape
    n_views = len(data.view_angles)
    bisector = float(np.mean(data.view_angles))
    centers = [fld.center_uv(a) for a in data.view_angles]
    steps_per_epoch = config.steps_per_epoch or math.ceil(len(frames) / config.batch_size)
    n_patches = config.patches_per_step or config.batch_size
    patch_samples = config.patch_samples_per_ray or config.samples_per_ray
    log, epoch_mse = [], []
    good_state = (fld.state_dict(), disc.state_dict())
    log_file = open(log_path, "a") if log_path else None
    t_start = clock()
    order: list = []
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            adversarial = epoch > config.warmup_epochs
            mses = []
            try:
                for _ in range(steps_per_epoch):
                    if len(order) < config.batch_size:
                        order.extend(rs.batches.permutation(len(frames)).tolist())
                    batch = [frames[i] for i in order[:config.batch_size]]
                    del order[:config.batch_size]
                    adv_now = adversarial and step % config.adversarial_every == 0
                    rec = _train_step(fld, disc, g_opt, d_opt, data, att, att_scale, batch, centers, bisector,
                                      config, rs, adv_now, n_patches, patch_samples, n_views, (h, w))
                    step += 1
                    rec.update(epoch=epoch, step=step, wall_time=clock() - t_start)
                    mses.append(rec["mse"])
                    log.append(rec)
                    if log_file:
                        log_file.write(json.dumps(rec) + "\n")
                        log_file.flush()
            except NonFiniteError as exc:
                fld.load_state_dict(good_state[0])
                disc.load_state_dict(good_state[1])
                raise DivergenceError(f"non-finite loss in epoch {epoch}: {exc}", good_state,
                                      checkpoint_path, epoch - 1) from exc
            epoch_mse.append(float(np.mean(mses)))
            good_state = (fld.state_dict(), disc.state_dict())
            if checkpoint_path:
                save_field_checkpoint(checkpoint_path, fld, disc, epoch)
            if progress:
                progress(epoch, epoch_mse[-1])
    finally:
        if log_file:
            log_file.close()
    return TrainResult(fld, disc, log, epoch_mse, data)


def _train_step(fld, disc, g_opt, d_opt, data, att, att_scale, batch, centers, bisector, config, rs,
                adversarial, n_patches, patch_samples, n_views, shape):
    h, w = shape
    origins, dirs, ts, seqs, targets, weights = [], [], [], [], [], []
    for s, f in batch:
        t = data.times[s][f]
        for v, a in enumerate(data.view_angles):
            idx = rs.rays.choice(h * w, size=min(config.rays_per_view, h * w), replace=False)
            rows, cols = np.divmod(idx, w)
            u, vv = _pixel_uv(data, rows, cols, centers[v])
            o, d = fld.rays(a, u, vv)
            origins.append(o)
            dirs.append(d)
            ts.append(np.full(idx.size, t))
            seqs.append(np.full(idx.size, s))
            targets.append(data.images[s][v, f].ravel()[idx])
            if data.weights is not None:
                weights.append(data.weights[s][v, f].ravel()[idx])
    seq_arr = np.concatenate(seqs)
    seq_arg = 0 if len(data.images) == 1 else seq_arr
    line = fld.line_integrals(np.concatenate(origins), np.concatenate(dirs), np.concatenate(ts), seq_arg,
                              config.samples_per_ray, rs.jitter)
    pred = T.exp(-line)
    target = np.concatenate(targets)
    mse = weighted_mse(pred, target, np.concatenate(weights) if weights else None)
    raw_mse = float(np.mean((pred.data - target) ** 2))
    # data term relative to the measured contrast so its weight is independent of absorption strength
    contrast = float(np.mean((1.0 - target) ** 2)) + 1e-12
    g_total = mse * (1.0 / contrast)
    rec = {"mse": raw_mse, "d_loss": None, "g_loss": None}
    if adversarial:
        fake_o, fake_d, fake_t, fake_s, real = [], [], [], [], []
        lo, hi = config.query_angle_range
        for j in range(n_patches):
            s, f = batch[j % len(batch)]
            angle = bisector + rs.angles.uniform(lo, hi)
            spec = sample_patch_specs((h, w), rs.patches, 1, config.patch_size)[0]
            rows, cols = spec.grid(config.patch_size)
            u, vv = _pixel_uv(data, rows, cols, fld.center_uv(angle))
            o, d = fld.rays(angle, u, vv)
            fake_o.append(o)
            fake_d.append(d)
            fake_t.append(np.full(o.shape[0], data.times[s][f]))
            fake_s.append(np.full(o.shape[0], s))
            rspec = sample_patch_specs((h, w), rs.patches, 1, config.patch_size)[0]
            view = int(rs.patches.integers(n_views))
            real.append(extract_patch(att[s][view, f], rspec, config.patch_size))
        k = config.patch_size
        fs = np.concatenate(fake_s)
        fake_line = fld.line_integrals(np.concatenate(fake_o), np.concatenate(fake_d), np.concatenate(fake_t),
                                       0 if len(data.images) == 1 else fs, patch_samples, rs.jitter)
        fake = T.reshape(fake_line, (n_patches, k, k)) * (1.0 / att_scale)
        real = np.stack(real).astype(np.float32) / att_scale
        # discriminator update on detached fakes
        losses = adversarial_losses(real, Tensor(fake.data), disc)
        d_grads = T.backward(losses["d_loss"], disc.parameters())
        d_opt.step(d_grads)
        g_loss = -T.mean(T.log_sigmoid(network_forward(disc, fake), LOG_FLOOR))
        g_total = g_total + g_loss * config.adversarial_weight
        rec["d_loss"] = losses["d_loss"].item()
        rec["g_loss"] = g_loss.item()
    grads = T.backward(g_total, fld.parameters(), allow_unused=True)
    g_opt.step(grads)
    return rec


def save_field_checkpoint(path, fld: ImplicitField, disc: Network | None = None, epoch: int | None = None):
    tensors = {f"field.{k}": v for k, v in fld.state_dict().items()}
    arch = {"field": fld.config(), "epoch": epoch}
    if disc is not None:
        tensors.update({f"disc.{k}": v for k, v in disc.state_dict().items()})
        arch["discriminator"] = disc.arch()
    save_checkpoint(path, tensors, arch)


def load_field_checkpoint(path):
    from ..autodiff.checkpoint import load_checkpoint
    from ..autodiff.nn import spec_from_dict

    tensors, arch = load_checkpoint(path)
    fld = ImplicitField.from_config(arch["field"])
    fld.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("field.")})
    disc = None
    if "discriminator" in arch:
        disc = build_network(spec_from_dict(arch["discriminator"]), np.random.default_rng(0))
        disc.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("disc.")})
    return fld, disc, arch
