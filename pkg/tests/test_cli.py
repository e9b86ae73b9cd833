import json
from pathlib import Path

import pytest

from branchlab import reporting
from branchlab.cli import main

MODELS = Path(__file__).resolve().parents[1] / "models"


def test_analyze_two_cycle(capsys):
    assert main(["analyze", str(MODELS / "two_cycle_poisson.toml")]) == 0
    doc = json.loads(capsys.readouterr().out)
    s = doc["data"]["structure"]
    assert s["r"] == 2 and s["rho"] == pytest.approx(1.0) and s["u"] == pytest.approx([0.5, 0.5])
    assert set(doc["metadata"]) >= {"version", "seed", "model_hash", "timestamp"}


def test_analyze_primitive(capsys):
    assert main(["analyze", str(MODELS / "primitive_two_type.json")]) == 0
    assert json.loads(capsys.readouterr().out)["data"]["structure"]["r"] == 1


def test_analyze_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"p": 1, "offspring": [{"kind": "poisson_product", "means": [1, 2]}],'
                   ' "immigration": {"kind": "poisson_product", "means": [1]}}')
    assert main(["analyze", str(bad)]) == 2
    assert "offspring[0].means" in capsys.readouterr().err
    assert main(["analyze", str(tmp_path / "missing.json")]) == 2
    assert main(["frobnicate"]) == 2


def test_analyze_decomposable_warning(tmp_path, capsys):
    f = tmp_path / "dec.json"
    f.write_text(json.dumps({"p": 2, "offspring": [
        {"kind": "poisson_product", "means": [1.0, 1.0]},
        {"kind": "poisson_product", "means": [0.0, 1.0]}],
        "immigration": {"kind": "poisson_product", "means": [1.0, 1.0]}}))
    assert main(["analyze", str(f)]) == 0
    assert "decomposable" in capsys.readouterr().err


def _data_rows(path):
    return [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]


def test_simulate_shapes(tmp_path):
    assert main(["simulate", str(MODELS / "single_poisson.json"), "--steps", "10", "--reps", "1",
                 "--out", str(tmp_path / "a")]) == 0
    assert len(_data_rows(tmp_path / "a" / "trajectories.csv")) == 1 + 11
    assert main(["simulate", str(MODELS / "single_poisson.json"), "--steps", "0",
                 "--out", str(tmp_path / "b")]) == 0
    assert _data_rows(tmp_path / "b" / "trajectories.csv") == ["rep,k,X0", "0,0,0"]


def test_simulate_deterministic_output(tmp_path):
    args = [str(MODELS / "two_cycle_poisson.json"), "--steps", "15", "--reps", "300", "--seed", "4"]
    main(["simulate", *args, "--out", str(tmp_path / "a"), "--threads", "1"])
    main(["simulate", *args, "--out", str(tmp_path / "b"), "--threads", "8"])
    for name in ("trajectories.csv", "moments.csv"):
        assert reporting.payload((tmp_path / "a" / name).read_text()) == \
            reporting.payload((tmp_path / "b" / name).read_text())


def test_limit_command(tmp_path):
    assert main(["limit", str(MODELS / "two_cycle_poisson.json"), "--reps", "2", "--dt", "0.01",
                 "--out", str(tmp_path)]) == 0
    coef = json.loads((tmp_path / "coefficients.json").read_text())["data"]
    assert coef["classes"][0]["a"] == pytest.approx(1.0) and coef["classes"][0]["b"] == pytest.approx(0.5)
    assert main(["limit", str(MODELS / "zero_immigration.json"), "--reps", "2", "--dt", "0.01",
                 "--out", str(tmp_path / "z")]) == 0
    coef = json.loads((tmp_path / "z" / "coefficients.json").read_text())["data"]
    assert all(c["a"] == 0 for c in coef["classes"])
    assert main(["limit", str(MODELS / "two_cycle_poisson.json"), "--dt", "0",
                 "--out", str(tmp_path)]) == 2
    assert main(["limit", str(MODELS / "subcritical.json"), "--out", str(tmp_path)]) == 2


def test_converge_command(tmp_path, capsys):
    out = tmp_path / "c"
    code = main(["converge", str(MODELS / "single_poisson.json"), "--reps", "2000",
                 "--n-list", "20,40,80", "--lindeberg-reps", "200", "--out", str(out), "--figures"])
    text = capsys.readouterr().out
    assert code == 0, text
    report = json.loads((out / "report.json").read_text())
    assert report["data"]["pass"] is True
    assert "independence test skipped: r = 1" in report["data"]["notes"]
    assert (out / "samples_n80.csv").exists() and (out / "ecdf_class0.png").exists()
    assert main(["converge", str(tmp_path / "nope.json"), "--out", str(out)]) == 2


def test_figures_written(tmp_path):
    assert main(["analyze", str(MODELS / "three_cycle.json"), "--out", str(tmp_path / "a.json"),
                 "--figures", str(tmp_path)]) == 0
    assert (tmp_path / "mean_matrix.png").stat().st_size > 0
    main(["simulate", str(MODELS / "three_cycle.json"), "--steps", "5", "--reps", "3",
          "--out", str(tmp_path / "s"), "--figures"])
    assert (tmp_path / "s" / "moments.png").exists()
