import json
import subprocess
import sys

import pytest

from dpvae.cli import main

from test_pipeline import TINY


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "exp.json"
    p.write_text(json.dumps({**TINY, "setting": "cdp", "sweep": [1.0], "clipping_norm": 1.0}))
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_synth_csv_and_binary(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--generator", "toy-series", "--n", 12, "--classes", 3, "--out", tmp_path / "d.csv")
    assert code == 0
    assert json.loads(out)["records"] == 12
    code, out, _ = run(capsys, "synth", "--n", 8, "--out", tmp_path / "d")
    assert code == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["d.bin", "d.csv", "d.json"]


def test_accountant_flags_and_config(tmp_path, capsys):
    code, out, _ = run(capsys, "accountant", "--q", 1.0, "--z", 1.0, "--steps", 10, "--delta", 1e-5)
    assert code == 0
    res = json.loads(out)
    assert res["T"] == 10 and res["eps"] > 0
    q = tmp_path / "q.json"
    q.write_text(json.dumps({"q": 0.01, "z": 1.0, "T": 100, "delta": 1e-5, "orders": [2, 4, 8]}))
    code, out, _ = run(capsys, "accountant", "--config", q)
    assert json.loads(out)["minimizing_alpha"] in (2, 4, 8)


def test_accountant_missing_values_is_error_json(capsys):
    code, out, err = run(capsys, "accountant", "--q", 0.1)
    assert code == 2 and out == ""
    assert json.loads(err)["error"] == "configuration"


def test_train_then_attack(cfg_path, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", cfg_path, "--out", tmp_path / "run")
    assert code == 0
    trained = json.loads(out)
    assert trained["steps"] == 15 and trained["epsilon"] > 0
    code, out, _ = run(capsys, "attack", "--config", cfg_path, "--model", trained["model"], "--out", tmp_path / "atk")
    assert code == 0
    assert 0 <= json.loads(out)["ap"] <= 1
    assert (tmp_path / "atk" / "scores.csv").read_text().startswith("record_id,score,is_member")


def test_sweep_and_report_reemit(cfg_path, tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "--config", cfg_path, "--seed", 9, "--out", tmp_path / "rep")
    assert code == 0
    assert json.loads(out)["rows"] == 1
    assert json.loads((tmp_path / "rep" / "report.json").read_text())["config"]["seed"] == 9
    code, out, _ = run(capsys, "report", tmp_path / "rep" / "report.json", "--out", tmp_path / "again")
    assert code == 0
    assert (tmp_path / "again" / "summary.csv").read_text() == (tmp_path / "rep" / "summary.csv").read_text()


def test_bad_config_exits_nonzero_with_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"setting": "cdp", "sweep": [3, 1]}))
    code, _, err = run(capsys, "sweep", "--config", bad)
    assert code == 2
    assert "sorted" in json.loads(err)["message"]
    code, _, err = run(capsys, "sweep", "--config", tmp_path / "missing.json")
    assert code == 1
    assert json.loads(err)["error"] == "FileNotFoundError"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dpvae", "accountant", "--q", "1", "--z", "2", "--steps", "1", "--delta", "0.5"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["z"] == 2.0
