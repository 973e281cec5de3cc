import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import subspace_angles

from xmpi.forward import FrameStack, null_shot
from xmpi.preprocess import (AffineTransform2D, DegenerateFlatError, PreprocessConfig, RangeError, StageOrderError,
                             anisotropic_tv, denoise_frame, fit_flatfield_basis, flatfield_correct, haar_forward,
                             haar_inverse, harmonize_views, mutual_information, register_pair, register_stack,
                             segment_droplets, tv_bregman, warp)
from xmpi.preprocess.denoise import cycle_spin_denoise
from xmpi.preprocess.flatfield import block_mean
from xmpi.preprocess.pipeline import denoise_stage, flatfield_stage, register_stage
from xmpi.synthetic import (dark_disk, flat_series, noisy_sphere_suite, smooth_modes, sphere_transmission,
                            textured_scene)

SHAPE = (64, 96)


def _mean_flat(shape=SHAPE):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return 800 * np.exp(-(((yy - shape[0] / 2) / (0.6 * shape[0])) ** 2 + ((xx - shape[1] / 2) / (0.6 * shape[1])) ** 2))


def _stack(frames, pitch=3.2, bid=0):
    frames = np.asarray(frames)
    return FrameStack(frames, np.arange(len(frames)) * 886.0, [null_shot(2)] * len(frames), bid, pitch,
                      {"provenance": ["simulate"]})


# -- flat field ----------------------------------------------------------------------


def test_identical_flats_zero_weights():
    m = _mean_flat()
    b = fit_flatfield_basis(np.repeat(m[None], 10, 0), 3)
    np.testing.assert_allclose(b.mean_flat, m)
    np.testing.assert_allclose(flatfield_correct(m, b), 1.0, atol=1e-6)


def test_subspace_recovered():
    m = _mean_flat()
    lo = (SHAPE[0] // 2, SHAPE[1] // 4)
    modes = smooth_modes(SHAPE, 2, 30.0, seed=1)
    flats, _ = flat_series(m, modes, 20, 2000.0, seed=2)
    b = fit_flatfield_basis(flats, 2, (2, 4))
    true_lo = np.stack([block_mean(x, (2, 4)).ravel() for x in modes]).T
    assert b.components_lowres.shape == (2,) + lo
    assert np.max(subspace_angles(true_lo, b.components_lowres.reshape(2, -1).T)) < 1e-3


def test_components_orthonormal():
    m = _mean_flat()
    flats, _ = flat_series(m, smooth_modes(SHAPE, 4, 20.0, seed=3), 16, 500.0, seed=4, noise=2.0)
    b = fit_flatfield_basis(flats, 7, (2, 4))
    c = b.components_lowres.reshape(7, -1)
    np.testing.assert_allclose(c @ c.T, np.eye(7), atol=1e-6)


def test_too_few_flats_names_count():
    with pytest.raises(ValueError, match="8"):
        fit_flatfield_basis(np.ones((5, 8, 8)), 7, (2, 2))


def test_k0_scalar_and_scale_equivariant():
    m = _mean_flat()
    b = fit_flatfield_basis(np.repeat(m[None], 3, 0), 0)
    np.testing.assert_allclose(flatfield_correct(2 * m, b), 2.0)
    fr = m * sphere_transmission(SHAPE, (30, 40), 20)
    np.testing.assert_allclose(flatfield_correct(3.5 * fr, b), 3.5 * flatfield_correct(fr, b), rtol=1e-12)


def test_flatfield_recovers_transmission():
    m = _mean_flat()
    modes = smooth_modes(SHAPE, 2, 30.0, seed=5)
    flats, _ = flat_series(m, modes, 24, 1500.0, seed=6)
    b = fit_flatfield_basis(flats, 7, (2, 4))
    T = sphere_transmission(SHAPE, (30, 50), 22, mu=3e-3)
    fr = (m + 0.3 * 1500.0 * modes[0]) * T
    assert np.sqrt(np.mean((flatfield_correct(fr, b) - T) ** 2)) < 0.01


def test_degenerate_flat():
    m = np.zeros(SHAPE)
    m[:4] = 100
    b = fit_flatfield_basis(np.repeat(m[None], 2, 0), 0)
    with pytest.raises(DegenerateFlatError):
        flatfield_correct(m, b)


def test_shape_mismatch():
    b = fit_flatfield_basis(np.ones((3, 8, 8)), 0)
    with pytest.raises(ValueError):
        flatfield_correct(np.ones((8, 4)), b)


# -- denoising -----------------------------------------------------------------------


@given(st.integers(0, 2**31 - 1), st.sampled_from([(16, 16), (24, 40), (64, 32)]))
def test_haar_perfect_reconstruction(seed, shape):
    img = np.random.default_rng(seed).normal(size=shape)
    lv = 3 if shape[0] % 8 == 0 and shape[1] % 8 == 0 else 1
    a, d = haar_forward(img, lv)
    np.testing.assert_allclose(haar_inverse(a, d), img, atol=1e-10)


def test_constant_frame_unchanged():
    f = np.full((40, 48), 0.97)
    np.testing.assert_allclose(denoise_frame(f), f, atol=1e-9)


@given(st.integers(0, 2**31 - 1), st.floats(0.001, 0.1))
def test_tv_never_increases(seed, sigma):
    rng = np.random.default_rng(seed)
    f = sphere_transmission((32, 32), (16, 14), 10, mu=5e-3) + rng.normal(0, sigma, (32, 32))
    out = denoise_frame(f)
    assert anisotropic_tv(out) <= anisotropic_tv(f)
    u, _ = tv_bregman(f)
    assert anisotropic_tv(u) <= anisotropic_tv(f)


def test_denoise_gain_and_idempotence():
    clean, noisy, _ = noisy_sphere_suite(3, 5.0, (96, 96), seed=1)
    for c, n in zip(clean, noisy):
        out = denoise_frame(n)
        psnr = lambda x: 10 * np.log10(1.0 / np.mean((x - c) ** 2))  # noqa: E731
        assert psnr(out) - psnr(n) >= 3.0
        twice = denoise_frame(out)
        assert np.linalg.norm(twice - out) < 0.1 * np.linalg.norm(out - n)


def test_tv_stops_on_tolerance():
    rng = np.random.default_rng(0)
    f = rng.normal(1, 0.01, (32, 32))
    _, it_loose = tv_bregman(f, tol=0.1)
    _, it_tight = tv_bregman(f, tol=1e-6)
    assert it_loose < it_tight <= 100


def test_cycle_spin_shift_count_bounded():
    with pytest.raises(ValueError):
        cycle_spin_denoise(np.ones((16, 16)), max_shift=3)


def test_denoise_rejects_nonfinite():
    f = np.ones((8, 8))
    f[2, 2] = np.nan
    with pytest.raises(ValueError):
        denoise_frame(f)


# -- registration --------------------------------------------------------------------


def test_affine_invariants():
    with pytest.raises(ValueError):
        AffineTransform2D(np.zeros((2, 2)))
    t = AffineTransform2D.from_params([1.0, -2.0, 3.0, 0.01, -0.02, 0.01], (10, 10))
    p = np.array([[3.0, 4.0], [7.0, -1.0]])
    np.testing.assert_allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)
    np.testing.assert_allclose(t.compose(t.inverse()).matrix, np.eye(2), atol=1e-12)
    assert t.rotation_deg == pytest.approx(3.0, abs=0.05)


def test_register_self_identity():
    img = textured_scene((64, 64))
    res = register_stack(np.stack([img, img]))
    for t in res.transforms:
        np.testing.assert_allclose(t.matrix, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(t.translation, 0, atol=1e-12)


def test_register_known_shift():
    img = textured_scene((96, 96))
    true = AffineTransform2D(np.eye(2), [3.5, -2.25])
    mov = warp(img, true.inverse())
    est, warn = register_pair(img, mov)
    assert not warn
    np.testing.assert_allclose(est.translation, true.translation, atol=0.25)


def test_register_mi_never_decreases_and_residual():
    img = textured_scene((80, 80), seed=1)
    c = (39.5, 39.5)
    rng = np.random.default_rng(2)
    frames = [img]
    for _ in range(3):
        t = AffineTransform2D.from_params([*rng.uniform(-4, 4, 2), rng.uniform(-1.5, 1.5), 0, 0, 0], c)
        frames.append(warp(img, t.inverse()))
    res = register_stack(np.stack(frames))
    assert all(a >= b - 1e-9 for a, b in zip(res.mi_after, res.mi_before))
    again = register_stack(res.warped)
    for t in again.transforms[1:]:
        assert np.linalg.norm(t.shift_at(c)) < 0.3


def test_mutual_information_self_max():
    img = textured_scene((48, 48))
    noise = np.random.default_rng(0).random((48, 48))
    assert mutual_information(img, img) > mutual_information(img, noise)


def test_register_flat_noise_warns():
    f = np.full((32, 32), 1.0)
    _, warn = register_pair(f, f)
    assert warn


# -- harmonization and segmentation --------------------------------------------------


def test_harmonize_factor_two_and_crop():
    a = _stack(np.ones((2, 80, 100), np.float32), pitch=6.4)
    b = _stack(np.ones((2, 160, 200), np.float32), pitch=3.2, bid=1)
    ha, hb = harmonize_views(a, b, roi_centers=((80, 100), (80, 100)), size=128)
    assert ha.frames.shape == hb.frames.shape == (2, 128, 128)
    assert ha.pixel_pitch == hb.pixel_pitch == 3.2
    assert ha.metadata["upsample_factor"] == 2.0


def test_harmonize_equal_pitch_is_crop():
    fr = np.random.default_rng(0).random((1, 40, 50)).astype(np.float32)
    ha, hb = harmonize_views(_stack(fr), _stack(fr, bid=1), roi_centers=((20, 25), (20, 25)), size=16)
    r0, c0 = ha.metadata["roi_origin_px"]
    np.testing.assert_array_equal(ha.frames[0], fr[0, r0:r0 + 16, c0:c0 + 16])


def test_harmonize_roi_out_of_bounds():
    fr = np.ones((1, 40, 50), np.float32)
    with pytest.raises(RangeError):
        harmonize_views(_stack(fr), _stack(fr, bid=1), roi_centers=((2, 2), (20, 25)), size=16)


def test_segment_constant_empty():
    assert not segment_droplets(np.full((64, 64), 0.5)).any()


@pytest.mark.parametrize("seed", range(20))
def test_segment_disk_iou(seed):
    frame, truth = dark_disk((128, 128), 20, 0.1, 0.01, seed=seed)
    m = segment_droplets(frame)
    assert (m & truth).sum() / (m | truth).sum() >= 0.9


@given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_segment_affine_intensity_invariant(a, b):
    frame, _ = dark_disk((64, 64), 12, 0.1, 0.01, seed=4)
    frame = (frame - frame.min()) / (frame.max() - frame.min())
    np.testing.assert_array_equal(segment_droplets(frame), segment_droplets(a * frame + b))


# -- pipeline order ------------------------------------------------------------------


def test_stage_order_enforced():
    m = _mean_flat((32, 32))
    frames = np.stack([m * 0.9] * 2)
    st_ = _stack(frames)
    flats = _stack(np.repeat(m[None], 4, 0))
    with pytest.raises(StageOrderError):
        denoise_stage(st_)
    cfg = PreprocessConfig(n_components=2, downsample=(2, 2))
    ff, _ = flatfield_stage(st_, flats, None, cfg)
    with pytest.raises(StageOrderError):
        register_stage(ff)
    with pytest.raises(StageOrderError):
        flatfield_stage(ff, flats, None, cfg)
    dn = denoise_stage(ff, cfg)
    stages = [p["stage"] for p in dn.metadata["provenance"] if isinstance(p, dict)]
    assert stages == ["flatfield", "denoise"]
