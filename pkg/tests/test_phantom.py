import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xmpi.phantom import (CapacityError, CollisionPhantom, DropletState, KinematicsError, ScalarField4D,
                          collision_kinematics, droplet_field, head_on_phantom, rasterize_phantom, sphere_phantom,
                          water_mu)


def _rot(axis, ang):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(ang) * k + (1 - math.cos(ang)) * k @ k


def test_water_mu_value():
    assert water_mu(10.0) == pytest.approx(5.33e-4, rel=0.02)


def test_droplet_radius_must_be_positive():
    with pytest.raises(ValueError):
        DropletState((0, 0, 0), 0.0)


def test_exterior_point_is_zero():
    ph = head_on_phantom()
    assert droplet_field(ph, np.array([1e4, 0, 0]), 0.0) == 0.0


def test_interior_is_mu_water():
    ph = sphere_phantom(30.0)
    assert droplet_field(ph, np.zeros(3), 0.0) == pytest.approx(ph.mu_water)


def test_precontact_mirror_symmetry():
    ph = head_on_phantom(impact_parameter=0.0)
    rng = np.random.default_rng(1)
    x = rng.uniform(-150, 150, (2000, 3))
    t = 0.5 * ph.contact_time()
    xm = x * np.array([-1, 1, 1])
    np.testing.assert_allclose(droplet_field(ph, x, t), droplet_field(ph, xm, t), atol=1e-12)


def test_precontact_equals_max_of_isolated():
    ph = head_on_phantom()
    rng = np.random.default_rng(2)
    for t in (0.0, 0.9 * ph.contact_time()):
        x = rng.uniform(-200, 200, (3000, 3))
        singles = [CollisionPhantom((d,), ph.mu_water, ph.merge_smoothness, ph.coalescence_time_constant,
                                    ph.boundary_width, ph.fluid, ph.time_window) for d in ph.droplets]
        ref = np.maximum(*(droplet_field(s, x, t) for s in singles))
        np.testing.assert_allclose(droplet_field(ph, x, t), ref, atol=1e-12)


@given(st.floats(0, 120_000), st.integers(0, 2**31 - 1))
def test_field_nonnegative(t, seed):
    ph = head_on_phantom(contact_time=40_000.0, time_window=(0, 128_000))
    x = np.random.default_rng(seed).uniform(-200, 200, (500, 3))
    v = droplet_field(ph, x, t)
    assert np.all(v >= 0) and np.all(np.isfinite(v))
    assert np.all(v <= ph.mu_water * (1 + 1e-12))


def test_volume_conservation_over_time():
    ph = head_on_phantom(contact_time=20_000.0, coalescence_time_constant=20.0, time_window=(0, 128_000))
    vols = []
    for t in np.linspace(0, 120_000, 9):
        g = rasterize_phantom(ph, 96, 2.4, [t])
        vols.append(g.data.sum() * 2.4**3 / ph.mu_water)
    vols = np.array(vols)
    assert (vols.max() - vols.min()) / vols.mean() < 0.01
    assert vols[-1] == pytest.approx(ph.total_volume, rel=0.01)


def test_full_coalescence_volume():
    ph = head_on_phantom(contact_time=0.0, coalescence_time_constant=1.0, time_window=(0, 1e6))
    g = rasterize_phantom(ph, 128, 1.6, [200_000.0])
    assert g.data.sum() * 1.6**3 / ph.mu_water == pytest.approx(2 * 4 / 3 * math.pi * 37.5**3, rel=0.01)


def test_kinematics_reference_numbers():
    k = collision_kinematics(head_on_phantom(), 886.0)
    assert k["displacement_per_frame"] == pytest.approx(2.13, abs=0.005)
    assert k["displacement_per_frame"] < 3.2
    assert k["impact_parameter"] == pytest.approx(0.12, abs=1e-9)
    assert k["weber"] == pytest.approx(6.0, abs=0.1)


def test_head_on_impact_zero():
    assert collision_kinematics(head_on_phantom(impact_parameter=0.0))["impact_parameter"] == pytest.approx(0, abs=1e-12)


def test_kinematics_errors():
    with pytest.raises(KinematicsError):
        collision_kinematics(head_on_phantom(relative_speed=0.0))
    with pytest.raises(KinematicsError):
        collision_kinematics(sphere_phantom())


@given(st.floats(-math.pi, math.pi), st.lists(st.floats(-1, 1), min_size=3, max_size=3),
       st.floats(0.0, 0.9), st.floats(0.5, 5.0))
def test_kinematics_rotation_invariant(ang, axis, b, speed):
    if np.linalg.norm(axis) < 1e-3:
        return
    ph = head_on_phantom(impact_parameter=b, relative_speed=speed)
    R = _rot(axis, ang)
    drops = tuple(DropletState(tuple(R @ np.array(d.center)), d.radius, tuple(R @ np.array(d.velocity)))
                  for d in ph.droplets)
    k0 = collision_kinematics(ph)
    k1 = collision_kinematics(CollisionPhantom(drops))
    assert k1["weber"] == pytest.approx(k0["weber"], abs=1e-9)
    assert k1["impact_parameter"] == pytest.approx(k0["impact_parameter"], abs=1e-9)


def test_rasterize_empty_and_exact():
    ph = sphere_phantom(20.0, mu_water=0.0)
    assert not rasterize_phantom(ph, 8, 4.0, [0.0]).data.any()
    ph = sphere_phantom(20.0)
    g = rasterize_phantom(ph, 16, 4.0, [0.0, 100.0])
    c = (np.arange(16) - 7.5) * 4.0
    Z, Y, X = np.meshgrid(c, c, c, indexing="ij")
    ref = droplet_field(ph, np.stack([X, Y, Z], -1), 0.0).astype(np.float32)
    np.testing.assert_array_equal(g.data[0], ref)
    assert g.voxel_pitch == 4.0 and g.frame_period == 100.0


def test_rasterize_sphere_volume():
    ph = sphere_phantom(37.5)
    g = rasterize_phantom(ph, 128, 1.0, [0.0])
    assert (g.data[0] > ph.mu_water / 2).sum() == pytest.approx(4 / 3 * math.pi * 37.5**3, rel=0.02)


def test_rasterize_errors():
    ph = sphere_phantom()
    with pytest.raises(CapacityError):
        rasterize_phantom(ph, 512, 1.0, [0.0], max_bytes=1 << 20)
    with pytest.raises(ValueError):
        rasterize_phantom(ph, 1, 1.0, [0.0])
    with pytest.raises(ValueError):
        rasterize_phantom(ph, 8, 1.0, [1.0, 0.0])


def test_gridded_interpolation_and_time_range():
    ph = sphere_phantom(20.0)
    g = rasterize_phantom(ph, 16, 4.0, [0.0, 10.0])
    c = (np.arange(16) - 7.5) * 4.0
    pts = np.array([[c[3], c[5], c[7]]])
    assert g(pts, 0.0)[0] == pytest.approx(g.data[0, 7, 5, 3])
    with pytest.raises(ValueError):
        g(pts, 20.0)
    with pytest.raises(ValueError):
        ScalarField4D(data=np.zeros((1, 2, 2, 2)))
