import csv
import json
import subprocess
import sys

import pytest

from lrvq.cli import main
from lrvq.config import save_config

from conftest import tiny_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    save_config(tiny_config(), path)
    return path


def test_full_workflow(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    common = ["--config", str(config_file), "--seed", "3", "--out", str(out)]
    assert main(["synth-data", *common, "--scenes", "3"]) == 0
    data = out / "scenes.csv"
    assert data.exists()
    assert main(["train-stage1", *common, "--data", str(data), "--epochs", "2"]) == 0
    assert main(["train-stage2", *common, "--data", str(data), "--stage1", str(out / "stage1.npz")]) == 0
    assert main(["evaluate", *common, "--data", str(data), "--stage1", str(out / "stage1.npz"),
                 "--stage2", str(out / "stage2.npz"), "--num-guesses", "8", "-k", "2", "--plot-data"]) == 0
    printed = capsys.readouterr().out
    assert "ADE_centroid@2s" in printed
    for name in ("metrics.csv", "metrics_per_agent.csv", "plot_data.csv", "stage1_curve.csv", "stage2_curve.csv"):
        assert (out / name).exists(), name
    with open(out / "metrics_per_agent.csv") as fh:
        header = next(csv.reader(fh))
    assert "ADE_uniform@2s" in header


def test_ablate_writes_table(tmp_path, config_file, capsys):
    out = tmp_path / "abl"
    assert main(["synth-data", "--config", str(config_file), "--out", str(out), "--scenes", "2"]) == 0
    assert main(["ablate", "--config", str(config_file), "--out", str(out), "--data", str(out / "scenes.csv"),
                 "--modes", "static", "low_rank", "--ranks", "1"]) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["mode"] for r in rows] == ["static", "low_rank"]
    assert set(rows[0]) == {"mode", "rank", "ADE_rec", "Acc", "ADE_20", "FDE_20"}
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["mode"] == "low_rank"


def test_errors_exit_nonzero_with_message(tmp_path, config_file, capsys):
    assert main(["train-stage1", "--config", str(config_file), "--out", str(tmp_path),
                 "--data", str(tmp_path / "missing.csv")]) == 1
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"depht": 3}}))
    assert main(["synth-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "depht" in capsys.readouterr().err
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"x")
    data = tmp_path / "s.csv"
    assert main(["synth-data", "--config", str(config_file), "--out", str(tmp_path), "--name", "s.csv"]) == 0
    assert main(["evaluate", "--config", str(config_file), "--out", str(tmp_path), "--data", str(data),
                 "--stage1", str(junk), "--stage2", str(junk)]) == 1


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "lrvq.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth-data", "train-stage1", "train-stage2", "evaluate", "ablate"):
        assert cmd in res.stdout
