import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from xmpi.cli import main
from xmpi.io import load_framestack, load_volume, read_frame_header

ROOT = Path(__file__).resolve().parents[1]
TINY = ROOT / "demos" / "desk_tiny.toml"


def _summaries(text: str) -> list[dict]:
    return [json.loads(ln) for ln in text.splitlines() if ln.startswith("{")]


@pytest.mark.parametrize("argv", [["bogus"], ["simulate", "--nope"], [], ["simulate", "--seed", "-3"]])
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)] if argv and argv[0] != "bogus" else argv) == 2


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path)]) == 2
    assert "none.toml" in capsys.readouterr().err


def test_bad_config_value_exit_3(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[beamline]\nphoton_energy = -1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 3
    assert "beamline.photon_energy" in capsys.readouterr().err
    assert main(["simulate", "--set", "train.batch_size=0", "--out", str(tmp_path / "run")]) == 3


def test_evaluate_without_extract_names_missing_file(tmp_path, capsys):
    assert main(["evaluate", "--out", str(tmp_path)]) == 1
    cap = capsys.readouterr()
    assert "volume.xvol" in cap.err
    assert _summaries(cap.out)[-1]["status"] == "error"


def test_simulate_writes_127_frames(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["simulate", "--out", str(out), "--set", "detector.pixels=[40, 64]", "--set", "detector.n_flats=8",
                 "--set", "detector.n_darks=2"]) == 0
    for i in (0, 1):
        assert read_frame_header(out / "sim" / f"view{i}.frames")["frame_count"] == 127
        st = load_framestack(out / "sim" / f"view{i}.frames")
        assert st.frames.shape == (127, 40, 64)
        assert load_framestack(out / "sim" / f"flat{i}.frames").frames.shape[0] == 8
        assert load_framestack(out / "sim" / f"dark{i}.frames").frames.shape[0] == 2
    summary = _summaries(capsys.readouterr().out)[-1]
    assert summary["stage"] == "simulate" and summary["status"] == "ok"
    manifest = json.loads((out / "manifest.json").read_text())
    assert "sim/view0.frames" in json.dumps(manifest)


def test_corrupt_input_exit_3(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(TINY), "--out", str(out)]) == 0
    p = out / "sim" / "view0.frames"
    p.write_bytes(p.read_bytes()[:-7])
    assert main(["preprocess", "--config", str(TINY), "--out", str(out)]) in (1, 3)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "xmpi", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("simulate", "preprocess", "train", "extract", "evaluate", "export", "all"):
        assert cmd in r.stdout


@pytest.mark.slow
def test_all_twice_deterministic(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        r = subprocess.run([sys.executable, "-m", "xmpi", "all", "--config", str(TINY), "--out", str(out),
                            "--seed", "3", "--deterministic"], capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        outs.append(out)
    a, b = outs
    assert (a / "extract" / "volume.xvol").read_bytes() == (b / "extract" / "volume.xvol").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert (a / "train" / "log.jsonl").read_bytes() == (b / "train" / "log.jsonl").read_bytes()
    vol = load_volume(a / "extract" / "volume.xvol")
    assert np.all(np.isfinite(vol.data)) and vol.data.min() >= 0
    assert len(list((a / "export").iterdir())) == 3 * vol.data.shape[0]
    metrics = json.loads((a / "evaluate" / "metrics.json").read_text())
    assert len(metrics["points"]) == vol.data.shape[0]
