import math

import numpy as np
import pytest

from xmpi.autodiff import Adam, backward
from xmpi.forward import DetectorModel, FrameStack, null_shot, project_view, view_geometry
from xmpi.phantom import CapacityError, ScalarField4D, rasterize_phantom, sphere_phantom, water_mu
from xmpi.recon import (DivergenceError, GridMismatchError, ImplicitField, Normalization, TrainConfig,
                        adversarial_losses, evaluate_reconstruction, extract_patch, extract_volume,
                        sample_patch_specs, sample_patches, train_reconstruction)
from xmpi.recon.evaluate import mask_iou, psnr
from xmpi.recon.field import RangeError, detector_grid
from xmpi.recon.losses import LOG_FLOOR, weighted_mse
from xmpi.recon.patches import PatchSpec
from xmpi.recon.train import load_field_checkpoint, save_field_checkpoint
from xmpi.autodiff.nn import DiscriminatorSpec, build_network

MU = water_mu()
TINY = dict(epochs=2, warmup_epochs=1, steps_per_epoch=2, batch_size=2, rays_per_view=8, samples_per_ray=8,
            patch_size=8, patches_per_step=1, hidden=8, depth=2, spatial_levels=3, time_levels=2, latent_dim=2,
            disc_channels=(4,))


def _field(dtype=np.float32, bias=-6.0, seed=0, **kw):
    norm = Normalization((0.0, 0.0, 0.0), 80.0, (0.0, 1000.0))
    return ImplicitField(norm, 50.0, 50.0, spatial_levels=kw.pop("spatial_levels", 4), time_levels=2,
                         latent_dim=2, hidden=kw.pop("hidden", 16), depth=kw.pop("depth", 2), mu_scale=MU,
                         output_bias=bias, seed=seed, dtype=dtype, **kw)


def _stacks(n_frames=4, shape=(16, 16), pitch=6.4, radius=30.0):
    f = ScalarField4D.from_phantom(sphere_phantom(radius))
    det = DetectorModel(pixels=shape, pixel_pitch=pitch).noiseless
    times = np.arange(n_frames) * 886.0
    out = []
    for a in (35.0, 58.8):
        fr = np.stack([project_view(f, view_geometry(a), det, t) for t in times]).astype(np.float32)
        out.append(FrameStack(fr, times, [null_shot(2, t) for t in times], 0, pitch, {"view_angle_deg": a}))
    return out


# -- field -----------------------------------------------------------------------


def test_field_nonnegative_on_many_samples():
    fld = _field(bias=0.0)
    for p in fld.trunk.parameters():
        p.data = np.random.default_rng(1).normal(0, 1, p.shape).astype(p.dtype)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-80, 80, (1_000_000, 3))
    t = rng.uniform(0, 1000)
    mu = fld.evaluate(pts, t, block=1 << 17)
    assert np.all(np.isfinite(mu)) and np.all(mu >= 0)


def test_time_out_of_range():
    with pytest.raises(RangeError):
        _field().evaluate(np.zeros((1, 3)), 2000.0)


def test_evaluate_independent_of_block():
    fld = _field()
    pts = np.random.default_rng(0).uniform(-50, 50, (1000, 3))
    np.testing.assert_array_equal(fld.evaluate(pts, 10.0, block=128), fld.evaluate(pts, 10.0, block=4096))


def test_render_in_unit_interval():
    fld = _field(bias=2.0)
    uu, vv = detector_grid((8, 8), 6.4)
    img = fld.render(40.0, 0.0, uu, vv, 16, np.random.default_rng(0)).data
    assert np.all(img > 0) and np.all(img <= 1)


def test_supervised_sphere_render_and_quadrature():
    """Fit µ directly to a sphere, then check the central chord and sample-count convergence."""
    fld = _field(dtype=np.float64, bias=0.0, hidden=32, depth=3, spatial_levels=4, output_gain=1.0)
    ph = sphere_phantom(37.5)
    rng = np.random.default_rng(3)
    opt = Adam(fld.parameters(), lr=3e-3)
    for _ in range(400):
        pts = rng.uniform(-50, 50, (512, 3))
        loss = weighted_mse(fld(pts, 0.0) * (1.0 / MU), ph(pts, 0.0) / MU)
        opt.step(backward(loss, fld.parameters(), allow_unused=True))
    center = fld.render(35.0, 0.0, np.array([0.0]), np.array([0.0]), 256).data[0]
    assert center == pytest.approx(math.exp(-2 * MU * 37.5), rel=0.02)
    uu, vv = detector_grid((12, 12), 8.0)
    a = fld.render(35.0, 0.0, uu, vv, 128).data
    b = fld.render(35.0, 0.0, uu, vv, 256).data
    assert np.max(np.abs(a - b) / b) < 2e-3


def test_checkpoint_roundtrip(tmp_path):
    fld = _field()
    path = tmp_path / "f.ckpt"
    save_field_checkpoint(path, fld)
    fld2, disc, _ = load_field_checkpoint(path)
    pts = np.random.default_rng(0).uniform(-50, 50, (100, 3))
    np.testing.assert_array_equal(fld.evaluate(pts, 5.0), fld2.evaluate(pts, 5.0))
    assert disc is None


# -- patches ---------------------------------------------------------------------


def test_center_crop_literal():
    img = np.random.default_rng(0).random((64, 64))
    p = extract_patch(img, PatchSpec((31.5, 31.5)), 32)
    np.testing.assert_allclose(p, img[16:48, 16:48], atol=1e-12)


def test_patches_in_bounds_many_draws():
    rng = np.random.default_rng(1)
    specs = sample_patch_specs((64, 96), rng, 100_000, 32)
    assert all(s.in_bounds((64, 96), 32) for s in specs)
    assert all(s.scale >= 1 and s.stride >= 1 for s in specs)


def test_patches_deterministic_and_size_check():
    imgs = [np.random.default_rng(2).random((40, 40))]
    a = sample_patches(imgs, np.random.default_rng(5), 4)
    b = sample_patches(imgs, np.random.default_rng(5), 4)
    for (sa, pa), (sb, pb) in zip(a, b):
        assert sa == sb
        np.testing.assert_array_equal(pa, pb)
    with pytest.raises(ValueError):
        sample_patches([np.zeros((20, 40))], np.random.default_rng(0), 1)


# -- losses ----------------------------------------------------------------------


def _zero_disc():
    d = build_network(DiscriminatorSpec(patch=8, channels=(2,)), np.random.default_rng(0), np.float64)
    for p in d.parameters():
        p.data[...] = 0
    return d


def test_adversarial_zero_logits():
    d = _zero_disc()
    out = adversarial_losses(np.ones((3, 8, 8)), np.zeros((2, 8, 8)), d)
    assert out["d_loss"].item() == pytest.approx(2 * math.log(2))
    assert out["g_loss"].item() == pytest.approx(math.log(2))


def test_adversarial_saturation_guard():
    d = _zero_disc()
    d.params["head_b"].data[...] = 1e4
    out = adversarial_losses(np.ones((1, 8, 8)), np.ones((1, 8, 8)), d)
    assert out["d_loss"].item() == pytest.approx(-LOG_FLOOR)
    assert out["g_loss"].item() == pytest.approx(0.0, abs=1e-12)
    d.params["head_b"].data[...] = -1e4
    out = adversarial_losses(np.ones((1, 8, 8)), np.ones((1, 8, 8)), d)
    assert out["g_loss"].item() == pytest.approx(-LOG_FLOOR)
    assert np.isfinite(out["d_loss"].item())
    with pytest.raises(ValueError):
        adversarial_losses(np.ones((0, 8, 8)), np.ones((1, 8, 8)), d)


# -- training --------------------------------------------------------------------


def test_zero_epochs_renders_unit_transmission():
    res = train_reconstruction(_stacks(), config=TrainConfig(**{**TINY, "epochs": 0}), mu_scale=MU)
    uu, vv = detector_grid((16, 16), 6.4)
    img = res.field.render(40.0, 0.0, uu, vv, 32).data
    # the initial output bias leaves µ = mu_scale * softplus(-6), a uniform deficit near 1e-4
    assert np.ptp(img) < 1e-6
    np.testing.assert_allclose(img, 1.0, atol=1e-3)
    assert res.log == []


def test_warmup_only_leaves_discriminator_untouched():
    cfg = TrainConfig(**{**TINY, "warmup_epochs": 2})
    ref = train_reconstruction(_stacks(), config=TrainConfig(**{**TINY, "epochs": 0}), mu_scale=MU)
    res = train_reconstruction(_stacks(), config=cfg, mu_scale=MU)
    for k, v in ref.discriminator.state_dict().items():
        np.testing.assert_array_equal(res.discriminator.state_dict()[k], v)
    assert all(r["d_loss"] is None for r in res.log)


def test_adversarial_phase_updates_discriminator():
    res = train_reconstruction(_stacks(), config=TrainConfig(**TINY), mu_scale=MU)
    assert [r["d_loss"] is None for r in res.log] == [True, True, False, False]
    assert len(res.epoch_mse) == 2


def test_training_deterministic(tmp_path):
    clock = lambda: 0.0  # noqa: E731
    a = train_reconstruction(_stacks(), config=TrainConfig(**TINY), mu_scale=MU, log_path=tmp_path / "a.jsonl",
                             clock=clock)
    b = train_reconstruction(_stacks(), config=TrainConfig(**TINY), mu_scale=MU, log_path=tmp_path / "b.jsonl",
                             clock=clock)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for k, v in a.field.state_dict().items():
        np.testing.assert_array_equal(b.field.state_dict()[k], v)
    rec = a.log[0]
    assert set(rec) >= {"epoch", "step", "mse", "d_loss", "g_loss", "wall_time"}


def test_divergence_restores_last_good_state():
    stacks = _stacks()
    stacks[0].frames[2, 3, 3] = np.nan
    cfg = TrainConfig(**{**TINY, "batch_size": 4, "steps_per_epoch": 1, "rays_per_view": 256})
    with pytest.raises(DivergenceError) as info:
        train_reconstruction(stacks, config=cfg, mu_scale=MU)
    assert info.value.epoch == 0 and info.value.state is not None


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(query_angle_range=(10, -10))


def test_mismatched_views_rejected():
    a, b = _stacks()
    b = FrameStack(b.frames[:, :8], b.timestamps, b.shot_records, 0, b.pixel_pitch, b.metadata)
    with pytest.raises(ValueError):
        train_reconstruction([a, b], config=TrainConfig(**TINY), mu_scale=MU)


# -- extraction ------------------------------------------------------------------


def _constant_field(c):
    fld = _field()
    fld.trunk.params["w_out"].data[...] = 0
    fld.trunk.params["b_out"].data[...] = math.log(math.expm1(c / MU))
    return fld


def test_extract_constant_field_exact():
    fld = _constant_field(2e-4)
    c = fld.evaluate(np.zeros((1, 3)), 0.0)[0]
    vol = extract_volume(fld, 0.0, n=32, sigma=2.0, downsample=4)
    assert vol.data.shape == (1, 8, 8, 8)
    assert np.all(vol.data == c)
    raw = extract_volume(fld, 0.0, n=16, sigma=0.0, downsample=1)
    assert np.all(raw.data == c)


def test_extract_tiled_identical():
    fld = _field(bias=0.0)
    for p in fld.trunk.parameters():
        p.data = np.random.default_rng(4).normal(0, 0.5, p.shape).astype(p.dtype)
    full = extract_volume(fld, 100.0, n=32, sigma=2.0, downsample=4)
    for tile in (4, 8, 12):
        tiled = extract_volume(fld, 100.0, n=32, sigma=2.0, downsample=4, tile=tile)
        assert tiled.data.tobytes() == full.data.tobytes()


def test_extract_metadata_and_errors():
    fld = _field()
    vol = extract_volume(fld, 0.0, n=16, downsample=4)
    assert vol.voxel_pitch == pytest.approx(100.0 / 16 * 4)
    assert vol.metadata["voxel_pitch_um"] == vol.voxel_pitch
    with pytest.raises(CapacityError, match="tile"):
        extract_volume(fld, 0.0, n=64, max_bytes=1000)
    with pytest.raises(ValueError):
        extract_volume(fld, 0.0, n=30, downsample=4)
    with pytest.raises(RangeError):
        extract_volume(fld, 5000.0, n=8, downsample=1)


# -- evaluation ------------------------------------------------------------------


def _sphere_grid(shift=0):
    ph = sphere_phantom(16.0, center=(shift, 0, 0), boundary_width=0.5)
    return rasterize_phantom(ph, 64, 1.0, [0.0])


def test_evaluate_identity_and_empty():
    g = _sphere_grid()
    rep = evaluate_reconstruction(g, g)
    assert rep.iou[0] == 1.0 and rep.volume_error_pct[0] == 0.0
    empty = ScalarField4D(data=np.zeros_like(g.data), voxel_pitch=1.0, times=g.times, origin=g.origin)
    assert evaluate_reconstruction(empty, g).iou[0] == 0.0


def test_evaluate_shift_matches_voxel_count():
    g, s = _sphere_grid(), _sphere_grid(1.0)
    rep = evaluate_reconstruction(s, g)
    thr = rep.threshold
    a, b = s.data[0] > thr, g.data[0] > thr
    brute = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y) / sum(1 for x, y in zip(a.ravel(), b.ravel())
                                                                           if x or y)
    assert rep.iou[0] == pytest.approx(brute, abs=1e-12)
    assert 0.85 < rep.iou[0] < 0.95


def test_evaluate_grid_mismatch():
    g = _sphere_grid()
    other = rasterize_phantom(sphere_phantom(16.0), 32, 2.0, [0.0])
    with pytest.raises(GridMismatchError):
        evaluate_reconstruction(other, g)


def test_evaluate_analytic_truth_and_psnr():
    ph = sphere_phantom(30.0)
    g = rasterize_phantom(ph, 48, 3.2, [0.0])
    stacks = _stacks(1, (16, 16), 6.4)
    rep = evaluate_reconstruction(g, ph, stacks=stacks, held_out_angles=(46.9,), held_out_shape=(16, 16))
    assert rep.iou[0] > 0.97
    assert min(rep.points[0].measured_psnr) > 40
    assert rep.points[0].held_out_psnr[0] > 40


def test_metric_helpers():
    assert mask_iou(np.zeros(4, bool), np.zeros(4, bool)) == 1.0
    assert psnr(np.ones(3), np.ones(3)) == math.inf
    assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)


def test_time_encoding_distinguishes_range_ends():
    from xmpi.autodiff import positional_encoding

    norm = Normalization((0.0, 0.0, 0.0), 80.0, (0.0, 1000.0))
    tn = norm.time(np.array([0.0, 1000.0]))
    np.testing.assert_allclose(tn, [-0.5, 0.5])
    enc = positional_encoding(tn, 6)
    assert np.abs(enc[0] - enc[1]).max() > 1.0
