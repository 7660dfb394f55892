import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from pamlab.cli import main
from pamlab.experiments import ExperimentConfig
from pamlab.field import load_field, sample_field
from pamlab.limits import LimitParams, ageing_cdf, intensity_tail
from pamlab.scales import locate_certified


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_field_snapshot(tmp_path, capsys):
    path = tmp_path / "f.bin"
    code, out, _ = _run(capsys, "field", "--d", "2", "--gamma", "1.5", "--seed", "4", "--radius", "6",
                        "--out", str(path))
    assert code == 0
    assert np.array_equal(load_field(path).values, sample_field(2, 6, 1.5, 4).values)
    assert json.loads(out)["max"] == sample_field(2, 6, 1.5, 4).max_value()


def test_locate_matches_library(capsys):
    code, out, _ = _run(capsys, "locate", "--gamma", "1", "--seed", "8", "--t", "1000")
    best, _ = locate_certified(1, 1.0, 8, 1000.0)
    assert code == 0 and json.loads(out)["z1"] == list(best.z1)


def test_points_csv(capsys):
    code, out, _ = _run(capsys, "points", "--gamma", "1", "--seed", "2", "--t", "1e4", "--tau", "0")
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0 and rows[0] == ["x_1", "y"]
    assert all(float(r[1]) >= 0 for r in rows[1:])


def test_ageing_time(capsys):
    code, out, _ = _run(capsys, "ageing-time", "--gamma", "1", "--seed", "3", "--t", "1e4", "--horizon", "1e6")
    rep = json.loads(out)
    assert code == 0 and rep["censored"] == (rep["T"] is None)


def test_solve_and_profile(tmp_path, capsys):
    prof = tmp_path / "p.csv"
    code, out, _ = _run(capsys, "solve", "--gamma", "1", "--seed", "1", "--radius", "4", "--t-grid", "1,2",
                        "--method", "etd", "--emit-profile", str(prof))
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0 and rows[0] == ["t", "logU", "argmax"] and len(rows) == 3
    table = list(csv.DictReader(open(prof)))
    assert len(table) == 2 * 9
    assert sum(float(r["mass"]) for r in table if r["t"] == "2.0") == pytest.approx(1.0)


def test_fk_and_eigen(capsys):
    code, out, _ = _run(capsys, "fk", "--gamma", "1", "--seed", "1", "--radius", "4", "--t", "1", "--paths", "2000")
    assert code == 0 and json.loads(out)["total"] > 0
    code, out, _ = _run(capsys, "eigen", "--gamma", "1", "--seed", "1", "--radius", "4")
    rep = json.loads(out)
    assert code == 0 and rep["lambda1"] > rep["lambda2"]


def test_limits_values(capsys):
    code, out, _ = _run(capsys, "limits", "--gamma", "1", "nu-tail", "0")
    assert code == 0 and float(out) == pytest.approx(2.0)
    code, out, _ = _run(capsys, "limits", "--gamma", "2", "ageing-cdf", "1")
    assert float(out) == pytest.approx(1 - math.log(2.0), abs=1e-9)
    code, out, _ = _run(capsys, "limits", "--gamma", "1", "--d", "2", "p1", "0.1", "-0.2")
    assert code == 0 and float(out) > 0


def test_limits_grid(tmp_path, capsys):
    path = tmp_path / "g.csv"
    code, _, _ = _run(capsys, "limits", "--gamma", "1", "--d", "2", "--grid", "0", "2", "5", "--out", str(path),
                      "nu-tail")
    table = list(csv.DictReader(open(path)))
    assert code == 0 and len(table) == 5
    for r in table:
        assert float(r["nu-tail"]) == pytest.approx(intensity_tail(float(r["arg"]), LimitParams(1.0, 2)))


def test_limits_bad_arity(capsys):
    code, _, err = _run(capsys, "limits", "--gamma", "1", "nu-dw", "1")
    assert code == 1 and "takes 3 numbers" in err
    code, _, err = _run(capsys, "limits", "--gamma", "1", "--d", "2", "--grid", "0", "1", "3", "p1")
    assert code == 1


def test_limit_sim(capsys, tmp_path):
    pts = tmp_path / "pts.csv"
    code, out, _ = _run(capsys, "limit-sim", "--gamma", "1", "--w", "1", "--samples", "5000",
                        "--points-csv", str(pts))
    rep = json.loads(out)
    assert code == 0
    assert rep["limit_survival"] == pytest.approx(1 - ageing_cdf(1.0, LimitParams(1.0, 1)))
    assert abs(rep["estimate"] - rep["limit_survival"]) < 4 * rep["stderr"]
    assert open(pts).readline().strip() == "x_1,y"


def test_domain_error_exit_code(capsys):
    code, _, err = _run(capsys, "locate", "--gamma", "1", "--seed", "0", "--t", "5")
    assert code == 1 and err.startswith("error:")


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["locate", "--gamma", "1"])
    assert exc.value.code == 2


def test_run_writes_outputs(tmp_path, capsys):
    cfg = ExperimentConfig(kind="scaling", gamma=1.0, d=1, t_values=[1e3, 1e4], replicas=8, base_seed=1,
                           limit_samples=2000)
    cfg.save(tmp_path / "cfg.json")
    code, out, _ = _run(capsys, "run", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "out"))
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert code == (0 if summary["passed"] else 2)
    assert len(out.strip().splitlines()) == len(summary["checks"])
    assert all(line.split()[0] in ("PASS", "FAIL") for line in out.splitlines())


def test_run_bad_config(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"kind": "scaling"}')
    code, _, err = _run(capsys, "run", str(tmp_path / "bad.json"))
    assert code == 1 and "error:" in err
    code, _, _ = _run(capsys, "run", str(tmp_path / "missing.json"))
    assert code == 1


def test_console_script_module():
    res = subprocess.run([sys.executable, "-m", "pamlab.cli", "limits", "--gamma", "1", "nu-tail", "0"],
                         capture_output=True, text=True, check=True)
    assert float(res.stdout) == pytest.approx(2.0)
