import hashlib
import json
import os
import struct
import subprocess
import sys

import numpy as np
import pytest

from cryojoint import io as cio
from cryojoint.cli import CONFIG_SCHEMA, default_config, main, validate_config

GOLDEN_STACK_SHA256 = "fa5aa492bd8bd04d4eeec94490645c0646ccbb3a57809961bd3cf28384ee223a"
SMALL = ["--n", "16", "--P", "12", "--m-t", "1", "--threads", "1"]


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "sim"
    assert main(["simulate", "--out", str(out), *SMALL, "--snr", "10"]) == 0
    return out


def test_default_simulation_matches_golden_checksum(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert _sha(tmp_path / "a" / "stack.mrc") == GOLDEN_STACK_SHA256
    meta = json.loads((tmp_path / "a" / "stack.json").read_text())
    assert meta["seed"] == 1 and meta["P"] == 500 and meta["snr_db"] == 0.0 and meta["sigma"] > 0


def test_simulate_is_idempotent_with_overwrite(tmp_path, sim):
    out = tmp_path / "again"
    assert main(["simulate", "--out", str(out), *SMALL, "--snr", "10"]) == 0
    for name in ("stack.mrc", "poses.csv", "stack.json", "ground_truth_coeffs.mrc", "init_poses.csv"):
        assert _sha(out / name) == _sha(sim / name)
    assert main(["simulate", "--out", str(out), *SMALL, "--snr", "10"]) == 3
    assert main(["simulate", "--out", str(out), *SMALL, "--snr", "10", "--overwrite"]) == 0
    assert _sha(out / "stack.mrc") == _sha(sim / "stack.mrc")


def test_noiseless_flag(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), *SMALL, "--snr", "+inf"]) == 0
    meta = json.loads((tmp_path / "stack.json").read_text())
    assert meta["sigma"] == 0.0 and meta["snr_db"] == "+inf"


@pytest.mark.parametrize(
    "doc",
    [{"sim": {"P": 0}}, {"sim": {"bogus": 1}}, {"extra": {}}, {"gd": {"eta": 1.5}}, {"admm": {"k_admm": 0}}],
)
def test_invalid_configs_exit_2(tmp_path, doc, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    assert main(["simulate", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 2
    assert "invalid configuration" in capsys.readouterr().err


def test_p_zero_flag_exit_2(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--P", "0"]) == 2


def test_config_file_then_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sim": {"n": 16, "P": 7, "snr_db": "inf"}}))
    assert main(["simulate", "--out", str(tmp_path / "o"), "--config", str(cfg), "--P", "5", "--threads", "1"]) == 0
    meta = json.loads((tmp_path / "o" / "stack.json").read_text())
    assert meta["P"] == 5 and meta["n"] == 16 and meta["sigma"] == 0.0


def test_defaults_validate_against_schema():
    doc = default_config()
    doc["sim"]["snr_db"] = 0.0
    validate_config(doc)
    assert set(doc) == set(CONFIG_SCHEMA["properties"])


def test_fixed_pose_joint_equals_reconstruct(tmp_path, sim):
    common = ["--stack", str(sim), "--max-outer-iters", "2", "--threads", "1"]
    assert main(["reconstruct", *common, "--out", str(tmp_path / "r")]) == 0
    assert main(["joint", *common, "--k-gd", "0", "--out", str(tmp_path / "j")]) == 0
    for name in ("volume_coeffs.mrc", "volume.mrc", "trace.jsonl", "poses.csv"):
        assert _sha(tmp_path / "r" / name) == _sha(tmp_path / "j" / name)


def test_joint_outputs_and_thread_invariance(tmp_path, sim, monkeypatch):
    common = ["--stack", str(sim), "--poses", str(sim / "init_poses.csv"), "--ground-truth", str(sim / "ground_truth_coeffs.mrc"), "--max-outer-iters", "2"]
    assert main(["joint", *common, "--threads", "1", "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("CRYOJOINT_THREADS", "3")
    assert main(["joint", *common, "--batch-size", "5", "--out", str(tmp_path / "b")]) == 0
    for name in ("volume_coeffs.mrc", "volume.mrc", "poses.csv", "trace.jsonl", "fsc_ground_truth.csv"):
        assert _sha(tmp_path / "a" / name) == _sha(tmp_path / "b" / name)
    trace = [json.loads(line) for line in (tmp_path / "a" / "trace.jsonl").read_text().splitlines()]
    assert len(trace) == 2 and "seconds" not in trace[0] and trace[0]["r_c"] is not None
    assert len(json.loads((tmp_path / "a" / "timing.json").read_text())["seconds"]) == 2
    table = cio.read_pose_table(tmp_path / "a" / "poses.csv")
    assert table.true_poses is not None


def test_half_split_requires_two_images(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "s"), "--n", "16", "--P", "1", "--threads", "1"]) == 0
    assert main(["joint", "--stack", str(tmp_path / "s"), "--half-split", "--out", str(tmp_path / "o"), "--threads", "1"]) == 2


def test_half_split_and_postprocess(tmp_path, sim):
    out = tmp_path / "h"
    args = ["joint", "--stack", str(sim), "--half-split", "--max-outer-iters", "2", "--k-gd", "0", "--threads", "1", "--out", str(out)]
    assert main(args) == 0
    for name in ("half1_coeffs.mrc", "half2.mrc", "fsc_half.csv", "volume.mrc"):
        assert (out / name).exists()
    assert main(["postprocess", "--half1", str(out / "half1.mrc"), "--half2", str(out / "half2.mrc"), "--out", str(tmp_path / "pp.mrc")]) == 0
    assert cio.read_volume(tmp_path / "pp.mrc")[0].shape == (16, 16, 16)


def test_shape_mismatch_exit_2(tmp_path, sim):
    cio.write_volume(tmp_path / "bad.mrc", np.zeros((8, 8, 8)))
    assert main(["joint", "--stack", str(sim), "--init-volume", str(tmp_path / "bad.mrc"), "--out", str(tmp_path / "o"), "--threads", "1"]) == 2


def test_nan_in_stack_exit_4(tmp_path, sim, capsys):
    bad = tmp_path / "bad"
    bad.mkdir()
    for name in ("poses.csv", "stack.json"):
        (bad / name).write_bytes((sim / name).read_bytes())
    raw = bytearray((sim / "stack.mrc").read_bytes())
    raw[1024 + 4 * 40 : 1024 + 4 * 41] = struct.pack("<f", float("nan"))
    (bad / "stack.mrc").write_bytes(raw)
    assert main(["joint", "--stack", str(bad), "--out", str(tmp_path / "o"), "--threads", "1", "--max-outer-iters", "2"]) == 4
    assert "iteration 1" in capsys.readouterr().err


def test_missing_input_exit_3(tmp_path):
    assert main(["joint", "--stack", str(tmp_path / "none"), "--out", str(tmp_path / "o"), "--threads", "1"]) == 3


def test_fsc_of_identical_volumes(tmp_path, sim):
    v = sim / "ground_truth.mrc"
    assert main(["fsc", str(v), str(v), "--out", str(tmp_path / "f.csv")]) == 0
    data = np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(data[:, 1], 1.0)


def test_pose_error_spike_and_degrees(tmp_path, sim):
    p = sim / "poses.csv"
    assert main(["pose-error", str(p), "--true", str(p), "--component", "theta1", "--out", str(tmp_path / "e.csv")]) == 0
    data = np.loadtxt(tmp_path / "e.csv", delimiter=",", skiprows=1, ndmin=2)
    assert data.shape[0] == 1 and data[0, 0] == 0.0
    out = tmp_path / "wide"
    assert main(["simulate", "--out", str(out), "--n", "16", "--P", "400", "--e-theta", "0.7", "--snr", "inf", "--threads", "1"]) == 0
    assert main(["pose-error", str(out / "init_poses.csv"), "--out", str(tmp_path / "d.csv"), "--bins", "20"]) == 0
    for comp in ("theta1", "theta2", "theta3"):
        x = np.loadtxt(tmp_path / f"d_{comp}.csv", delimiter=",", skiprows=1)[:, 0]
        half_bin = (x[1] - x[0]) / 2
        lo, hi = x[0] - half_bin, x[-1] + half_bin
        assert -40.11 <= lo < -38 and 38 < hi <= 40.11


def test_refine_poses_command(tmp_path, sim):
    out = tmp_path / "rp"
    args = ["refine-poses", "--stack", str(sim), "--poses", str(sim / "init_poses.csv"), "--volume", str(sim / "ground_truth_coeffs.mrc"), "--out", str(out), "--threads", "1"]
    assert main(args) == 0
    s = json.loads((out / "gd_summary.json").read_text())
    assert s["final_cost"] <= s["initial_cost"]


def test_console_entry_point(tmp_path):
    env = dict(os.environ, PYTHONWARNINGS="ignore")
    r = subprocess.run([sys.executable, "-m", "cryojoint.cli", "simulate", "--out", str(tmp_path), "--P", "0"], capture_output=True, text=True, env=env)
    assert r.returncode == 2
    r = subprocess.run([sys.executable, "-m", "cryojoint.cli", "--help"], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and "pose-error" in r.stdout
