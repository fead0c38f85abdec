import json

import pytest

from fedprog.cli import main


def test_end_to_end(tmp_path, capsys):
    data, model = tmp_path / "data", tmp_path / "model"
    assert main(["simulate", "--study", "sim1", "--missing", "0.3", "--seed", "1", "--out", str(data)]) == 0
    assert (data / "roster.json").exists()
    assert main(["train", "--data", str(data), "--k", "2", "--max-sweeps", "10", "--out", str(model)]) == 0
    assert json.loads((model / "meta.json").read_text())["K"] == 2
    assert main(["evaluate", "--model", str(model), "--data", str(data), "--out", str(tmp_path / "ev")]) == 0
    assert "median" in capsys.readouterr().out
    assert main(["train", "--data", str(data), "--mode", "individual", "--user", "2", "--k", "2",
                 "--max-sweeps", "10", "--out", str(tmp_path / "ind")]) == 0
    meta = json.loads((tmp_path / "ind" / "meta.json").read_text())
    assert meta["participants"] == ["user2"]
    assert main(["train", "--data", str(data), "--mode", "non-federated", "--k", "2", "--max-sweeps", "10",
                 "--out", str(tmp_path / "nf")]) == 0
    assert json.loads((tmp_path / "nf" / "meta.json").read_text())["mode"] == "non-federated"


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "m")]) == 2
    assert main(["reproduce", "cmapss"]) == 2
    assert main(["reproduce", "cmapss", "--cmapss-dir", str(tmp_path), "--perms", "1", "--levels", "0.3"]) == 1
    with pytest.raises(SystemExit):
        main(["train", "--k-grid", "5..2", "--data", "x"])


def test_reproduce_timing(tmp_path):
    assert main(["reproduce", "timing", "--users", "5,10", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "aggregate.csv").read_text().count("\n") == 3
