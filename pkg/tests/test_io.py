import struct
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from xmpi.forward import FrameStack, null_shot, sase_shot_model
from xmpi.io import (ConfigError, DependencyError, FormatError, RunConfig, RunManifest, export_visuals, isosurface,
                     load_framestack, load_volume, parse_config, parse_override, read_frame_header, read_mesh,
                     store_framestack, store_volume, validate)
from xmpi.io.formats import sidecar_path
from xmpi.phantom import ScalarField4D, rasterize_phantom, sphere_phantom

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# -- configuration ---------------------------------------------------------------


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.toml"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg == parse_config(None)
    assert cfg["beamline"]["photon_energy"] == 10.0
    assert cfg["beamline"]["pulse_period"] == 886.0
    assert cfg["beamline"]["frames_per_train"] == 128
    assert cfg["preprocess"]["n_components"] == 7
    assert list(cfg["preprocess"]["downsample"]) == [2, 4]
    assert cfg["preprocess"]["tv_weight"] == 0.9
    assert cfg["train"]["batch_size"] == 6 and cfg["train"]["lr"] == 1e-4
    assert cfg["train"]["warmup_epochs"] == 5
    assert cfg["train"]["spatial_levels"] == 10 and cfg["train"]["time_levels"] == 6
    assert cfg["io"]["extract_n"] == 512 and cfg["io"]["extract_sigma"] == 2


def test_negative_energy_names_key(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[beamline]\nphoton_energy = -1\n")
    with pytest.raises(ConfigError) as e:
        parse_config(p)
    assert e.value.path == "beamline.photon_energy"
    assert "beamline.photon_energy" in str(e.value)


@pytest.mark.parametrize("text, path", [
    ("[beamline]\nbogus = 1\n", "beamline.bogus"),
    ("[nosuch]\nx = 1\n", "nosuch"),
    ("[train]\nbatch_size = 'six'\n", "train.batch_size"),
    ("[train]\nbatch_size = 0\n", "train.batch_size"),
    ("[beamline]\nefficiencies = [0.5]\n", "beamline.efficiencies"),
    ("[io]\nextract_n = 30\n", "io.extract_n"),
])
def test_schema_violations(tmp_path, text, path):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ConfigError) as e:
        parse_config(p)
    assert e.value.path == path


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        parse_config("/nonexistent/run.toml")


def test_roundtrip(tmp_path):
    cfg = parse_config(None).with_overrides(["train.epochs=7", "phantom.kind='sphere'", "detector.pixels=[40, 64]"])
    p = tmp_path / "rt.toml"
    p.write_text(cfg.to_toml())
    again = parse_config(p)
    assert again == cfg
    assert again["train"]["epochs"] == 7 and again["phantom"]["kind"] == "sphere"


@given(st.integers(1, 1000), st.floats(1e-6, 1.0))
def test_roundtrip_property(epochs, lr):
    cfg = validate({"train": {"epochs": epochs, "lr": lr}})
    assert validate(tomllib.loads(cfg.to_toml())) == cfg


def test_parse_override():
    assert parse_override("train.epochs=3") == ("train", "epochs", 3)
    assert parse_override("phantom.kind=sphere") == ("phantom", "kind", "sphere")
    with pytest.raises(ConfigError):
        parse_override("epochs=3")


def test_derived_objects():
    cfg = parse_config(None)
    assert len(cfg.beamline_config().splitters) == 2
    assert len(cfg.detectors()) == 2
    assert cfg.train_config(5).seed == 5
    assert cfg.mu() == pytest.approx(5.33e-4, rel=0.02)
    assert isinstance(cfg, RunConfig)


# -- frame stacks ----------------------------------------------------------------


def _stack(n=5, shape=(6, 7), dtype=np.uint16):
    rng = np.random.default_rng(0)
    frames = rng.integers(0, 1024, (n,) + shape).astype(dtype)
    shots = sase_shot_model(1, n)
    return FrameStack(frames, np.arange(n) * 886.0, shots, 1, 6.4, {"view_angle_deg": 58.8, "note": [1, 2]})


def test_framestack_roundtrip_bit_exact(tmp_path):
    st_ = _stack()
    store_framestack(tmp_path / "a.frames", st_)
    back = load_framestack(tmp_path / "a.frames")
    assert back.frames.dtype == st_.frames.dtype
    np.testing.assert_array_equal(back.frames, st_.frames)
    np.testing.assert_array_equal(back.timestamps, st_.timestamps)
    assert back.shot_records == st_.shot_records
    assert back.beamlet_id == 1 and back.pixel_pitch == 6.4
    assert back.metadata == st_.metadata


def test_float_frames_roundtrip(tmp_path):
    st_ = _stack(dtype=np.float32)
    st_ = st_.replace_frames(st_.frames / 1000)
    store_framestack(tmp_path / "f.frames", st_)
    np.testing.assert_array_equal(load_framestack(tmp_path / "f.frames").frames, st_.frames)


def test_127_frame_header(tmp_path):
    st_ = FrameStack(np.zeros((127, 4, 4), np.uint16), np.arange(127) * 886.0, [null_shot()] * 127, 0, 3.2)
    store_framestack(tmp_path / "h.frames", st_)
    assert read_frame_header(tmp_path / "h.frames")["frame_count"] == 127
    raw = (tmp_path / "h.frames").read_bytes()
    assert raw[:4] == b"XFRM" and struct.unpack_from("<I", raw, 12)[0] == 127


def test_truncated_payload_offset(tmp_path):
    p = tmp_path / "t.frames"
    store_framestack(p, _stack())
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(FormatError) as e:
        load_framestack(p)
    assert e.value.offset == len(raw) - 10
    p.write_bytes(raw[:20])
    with pytest.raises(FormatError):
        load_framestack(p)


def test_trailing_and_corrupt(tmp_path):
    p = tmp_path / "c.frames"
    store_framestack(p, _stack())
    raw = p.read_bytes()
    p.write_bytes(raw + b"\0\0")
    with pytest.raises(FormatError) as e:
        load_framestack(p)
    assert e.value.offset == len(raw)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as e:
        load_framestack(p)
    assert e.value.offset == 0
    flipped = bytearray(raw)
    flipped[-1] ^= 0xFF
    p.write_bytes(bytes(flipped))
    with pytest.raises(FormatError, match="hash"):
        load_framestack(p)


def test_missing_sidecar(tmp_path):
    p = tmp_path / "m.frames"
    store_framestack(p, _stack())
    sidecar_path(p).unlink()
    with pytest.raises(FormatError, match="sidecar"):
        load_framestack(p)


def test_store_rejects_out_of_range(tmp_path):
    st_ = _stack(dtype=np.int32)
    st_.frames[0, 0, 0] = 70000
    with pytest.raises(ValueError):
        store_framestack(tmp_path / "x.frames", st_)


# -- volumes ---------------------------------------------------------------------


def _volume(nt=2):
    return rasterize_phantom(sphere_phantom(10.0), 12, 2.0, np.arange(nt) * 886.0)


def test_volume_roundtrip_and_layout(tmp_path):
    v = _volume()
    v.origin = np.array([1.0, -2.0, 3.5])
    p = tmp_path / "v.xvol"
    store_volume(p, v)
    raw = p.read_bytes()
    assert len(raw) - 96 == 12**3 * 2 * 4
    back = load_volume(p)
    np.testing.assert_array_equal(back.data, v.data)
    assert back.voxel_pitch == 2.0 and back.frame_period == 886.0
    np.testing.assert_array_equal(back.origin, v.origin)
    # x fastest: the second stored float is voxel (t=0, z=0, y=0, x=1)
    assert np.frombuffer(raw, "<f4", 2, 96)[1] == v.data[0, 0, 0, 1]


def test_volume_value_scale(tmp_path):
    v = _volume(1)
    store_volume(tmp_path / "s.xvol", v, value_scale=1e-4)
    np.testing.assert_allclose(load_volume(tmp_path / "s.xvol").data, v.data, rtol=1e-6)


def test_volume_size_mismatch(tmp_path):
    p = tmp_path / "v.xvol"
    store_volume(p, _volume(1))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_volume(p)


# -- manifest --------------------------------------------------------------------


def test_manifest_records_and_verifies(tmp_path):
    (tmp_path / "a.bin").write_bytes(b"abc")
    m = RunManifest({"x": 1}, {"run": 3})
    m.record("s1", tmp_path, [], ["a.bin"])
    m.save(tmp_path)
    m2 = RunManifest.load(tmp_path)
    assert m2.artifacts() == m.artifacts()
    m2.verify_inputs(tmp_path, ["a.bin"])
    (tmp_path / "a.bin").write_bytes(b"abd")
    with pytest.raises(DependencyError, match="hash"):
        m2.verify_inputs(tmp_path, ["a.bin"])
    with pytest.raises(DependencyError, match="b.bin"):
        m2.verify_inputs(tmp_path, ["b.bin"])
    (tmp_path / "c.bin").write_bytes(b"")
    with pytest.raises(DependencyError, match="not listed"):
        m2.verify_inputs(tmp_path, ["c.bin"])


# -- export ----------------------------------------------------------------------


def test_mip_zero_volume_black(tmp_path):
    v = ScalarField4D(data=np.zeros((3, 8, 8, 8), np.float32), voxel_pitch=1.0, times=[0.0, 1.0, 2.0])
    files = export_visuals(v, tmp_path, "mip")
    assert len(files) == 3
    img = np.array(Image.open(files[0]))
    assert img.dtype == np.uint16 and not img.any()


def test_sphere_mesh_radius(tmp_path):
    ph = sphere_phantom(16.0, boundary_width=1.0)
    v = rasterize_phantom(ph, 48, 1.0, [0.0])
    (f,) = export_visuals(v, tmp_path, "mesh", threshold=ph.mu_water / 2)
    verts, faces = read_mesh(f)
    r = np.linalg.norm(verts, axis=1)
    assert len(faces) > 100
    assert np.all(np.abs(r - 16.0) <= 1.0)


def test_isosurface_empty_when_not_crossed():
    v, f = isosurface(np.zeros((4, 4, 4)), 0.5, 1.0, (0, 0, 0))
    assert v.shape == (0, 3) and f.shape == (0, 3)


def test_one_file_per_time_point_each_mode(tmp_path):
    v = _volume(3)
    for mode in ("mip", "mesh", "montage"):
        files = export_visuals(v, tmp_path / mode, mode, view_angles=(35.0, 58.8))
        assert len(files) == 3 and all(p.exists() for p in files)


def test_export_errors(tmp_path):
    v = _volume(1)
    (tmp_path / "file").write_text("x")
    with pytest.raises(OSError):
        export_visuals(v, tmp_path / "file", "mip")
    with pytest.raises(ValueError):
        export_visuals(v, tmp_path, "gif")
