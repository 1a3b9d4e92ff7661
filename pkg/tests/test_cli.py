import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from flexseg.cli import EXIT_DIVERGED, EXIT_GRADCHECK, EXIT_INVALID, main
from flexseg.gap import PrototypeBank
from flexseg.morphology import extract_boundary, granularity_bands, downsample_mask
from flexseg.tensor_io import read_tensor, write_tensor


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["--seed", "4", "gen-data", "--scenes", "3", "--height", "16", "--width", "16",
                 "--classes", "3", "--jitter", "1", "--out", str(out)]) == 0
    return out


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_gen_data_manifest(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["n_scenes"] == 3
    assert read_tensor(dataset / "scene_0000.image.npy").shape == (16, 16, 3)


def test_train_with_config(dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_iters": 30, "hidden_dim": 8, "feature_dim": 8, "ema_period": 5}))
    out = tmp_path / "run"
    assert main(["--config", str(cfg), "train", "--data", str(dataset), "--out", str(out)]) == 0
    summary = _json(capsys)
    assert 0.0 <= summary["evaluation"]["boundary_error_rate"] <= 1.0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "loss_total", "loss_ube", "loss_gap", "boundary_error_rate",
                       "interior_error_rate", "sampling_mode"]
    assert len(rows) == 31
    assert PrototypeBank.load(out / "bank").prototypes.shape == (3, 3, 8)
    assert json.loads((out / "summary.json").read_text())["config"]["n_iters"] == 30


def test_invalid_config_exit_code(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"tau_gap": -1.0}))
    assert main(["--config", str(cfg), "train", "--data", str(dataset), "--out", str(tmp_path / "r")]) == EXIT_INVALID
    assert "tau_gap" in capsys.readouterr().err
    cfg.write_text(json.dumps({"no_such_key": 1}))
    assert main(["--config", str(cfg), "train", "--data", str(dataset)]) == EXIT_INVALID


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(dataset, tmp_path):
    cfg = tmp_path / "inf.json"
    cfg.write_text('{"lr": Infinity, "n_iters": 5, "hidden_dim": 4, "feature_dim": 4}')
    assert main(["--config", str(cfg), "train", "--data", str(dataset), "--out", str(tmp_path / "r")]) == EXIT_DIVERGED


def test_gradcheck_exit_codes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    report = _json(capsys)
    assert report["passed"] and report["max_rel_error"] < 1e-4
    assert (tmp_path / "gradcheck.json").exists()
    assert main(["gradcheck", "--tol", "0"]) == EXIT_GRADCHECK


def test_boundary_command(tmp_path):
    mask = np.kron(np.random.default_rng(0).integers(0, 3, (4, 4)), np.ones((4, 4), dtype=np.int32))
    write_tensor(mask.astype(np.int32), tmp_path / "m.npy")
    assert main(["boundary", "--mask", str(tmp_path / "m.npy"), "--kd", "5", "--ke", "3",
                 "--out", str(tmp_path / "b.npy")]) == 0
    np.testing.assert_array_equal(read_tensor(tmp_path / "b.npy"), extract_boundary(mask, 5, 3))
    assert main(["boundary", "--mask", str(tmp_path / "m.npy"), "--granularities", "3,5,7",
                 "--stride", "2", "--out", str(tmp_path / "g.npy")]) == 0
    expected = granularity_bands(downsample_mask(mask, 2), (3, 5, 7)).bands
    np.testing.assert_array_equal(read_tensor(tmp_path / "g.npy"), expected)


def test_boundary_bad_kernel(tmp_path):
    write_tensor(np.zeros((4, 4), dtype=np.int32), tmp_path / "m.npy")
    assert main(["boundary", "--mask", str(tmp_path / "m.npy"), "--kd", "4",
                 "--out", str(tmp_path / "b.npy")]) == EXIT_INVALID


def test_bad_npy_exit_code(tmp_path):
    (tmp_path / "junk.npy").write_bytes(b"not an npy file")
    assert main(["boundary", "--mask", str(tmp_path / "junk.npy"), "--out", str(tmp_path / "b.npy")]) == EXIT_INVALID


@pytest.fixture()
def logits_mask(tmp_path):
    rng = np.random.default_rng(1)
    mask = np.kron(rng.integers(0, 3, (4, 4)), np.ones((3, 3), dtype=np.int32)).astype(np.int32)
    write_tensor(rng.normal(size=(12, 12, 3)), tmp_path / "z.npy")
    write_tensor(mask, tmp_path / "m.npy")
    return tmp_path / "z.npy", tmp_path / "m.npy"


def test_ube_weights_command(logits_mask, tmp_path):
    z, m = logits_mask
    assert main(["ube-weights", "--logits", str(z), "--mask", str(m), "--alpha", "3.0",
                 "--out", str(tmp_path / "w.npy")]) == 0
    w = read_tensor(tmp_path / "w.npy")
    b = extract_boundary(read_tensor(m), 3, 3).astype(bool)
    assert np.all(w[~b] == 1.0)
    assert np.all((w[b] > 1.0) & (w[b] < 4.0))


@pytest.mark.parametrize("strategy", ["enhance", "ignore", "threshold", "reduce", "ube"])
def test_loss_command(logits_mask, strategy, capsys):
    z, m = logits_mask
    assert main(["loss", "--strategy", strategy, "--logits", str(z), "--mask", str(m)]) == 0
    out = _json(capsys)
    assert out["strategy"] == strategy and np.isfinite(out["loss"])


def test_gap_step_command(tmp_path, capsys):
    rng = np.random.default_rng(2)
    write_tensor(rng.normal(size=(4, 4, 6)), tmp_path / "f.npy")
    write_tensor(np.kron(rng.integers(0, 3, (2, 2)), np.ones((8, 8), dtype=np.int32)).astype(np.int32),
                 tmp_path / "m.npy")
    args = ["gap-step", "--features", str(tmp_path / "f.npy"), "--mask", str(tmp_path / "m.npy"),
            "--bank", str(tmp_path / "bank")]
    assert main(args) == EXIT_INVALID
    assert main(args + ["--classes", "3"]) == 0
    first = _json(capsys)
    assert first["frequencies"] and np.isfinite(first["loss_gap"])
    assert main(args + ["--out-bank", str(tmp_path / "next")]) == 0
    second = _json(capsys)
    nxt = PrototypeBank.load(tmp_path / "next")
    assert nxt.frequencies.sum() == 2 * np.sum(first["frequencies"])
    assert second["frequencies"] == nxt.frequencies.tolist()


def test_has_sim_command(tmp_path):
    out = tmp_path / "trace.csv"
    assert main(["has-sim", "--schedule", "sigmoid", "--k", "0.05", "--images", "20", "--iters", "400",
                 "--tau", "1.0", "--seed", "7", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "iter,threshold,mode,image_id"
    assert len(lines) == 401
    modes = [ln.split(",")[2] for ln in lines[1:]]
    assert modes[0] == "random" and modes[-1] == "hardness"


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "flexseg.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "gradcheck", "reproduce-motivation", "boundary",
                "ube-weights", "loss", "gap-step", "has-sim"):
        assert cmd in res.stdout


def test_reproduce_motivation_command(dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"hidden_dim": 8, "feature_dim": 8}))
    out = tmp_path / "mot"
    assert main(["--config", str(cfg), "reproduce-motivation", "--data", str(dataset),
                 "--iters", "20", "--out", str(out)]) == 0
    res = _json(capsys)
    assert set(res) == {"baseline", "enhance", "ignore", "threshold", "reduce"}
    with open(out / "motivation.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["strategy", "boundary_error_rate", "interior_error_rate"]
    assert len(rows) == 6
