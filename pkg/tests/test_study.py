import csv
import json
import math

import numpy as np
import pytest

from thinhomog import cli, study
from thinhomog.errors import ConfigError, ValidationFailure

from corpus import FLAT_F, LAYERED_F

FAST_FLAT = f"""
[geometry]
F = "{FLAT_F}"
L = 1
[coefficients]
c = "1"
f = "1"
[study]
eps = 0.2, 0.1
[mesh]
per_period = 8
n_s = 8
elements = 64
[tests]
measure_phi = "1 - x1^2"
[output]
timing = no
"""

LAYERED = f"""
[geometry]
F = "{LAYERED_F}"
L = 1
[coefficients]
a11 = "2 + cos(2*pi*y1)"
a22 = "2 + cos(2*pi*y1)"
c = "1"
f = "1"
[study]
eps = 0.2, 0.1
[mesh]
per_period = 16
n_s = 8
elements = 32
matched_cells = false
cell_n1 = 64
cell_n2 = 32
"""


@pytest.fixture(scope="module")
def flat_report():
    return study.run_study(study.StudyConfig.from_string(FAST_FLAT))


# -- config ---------------------------------------------------------------------------

def test_config_parsing():
    cfg = study.StudyConfig.from_string(FAST_FLAT)
    assert cfg.F == FLAT_F and cfg.L == 1.0
    assert cfg.eps == [0.2, 0.1]
    assert cfg.measure_phi == ["1 - x1^2"]
    assert cfg.flux_psi == ["1", "cos(2*pi*y1)"]
    assert cfg.timing is False
    assert cfg.cell_resolution() == (8, 8)


@pytest.mark.parametrize("text", [
    "[geometry]\nF = 1\n",
    "[geometry]\nF = \"1 - y2^2\"\nL = -1\n",
    "[geometry]\nF = \"1 - y2^2\"\nL = 1\n[study]\neps = 0.1, 0.2\n",
    "[geometry]\nF = \"1 - y2^2\"\nL = 1\n[output]\nformats = xml\n",
    "[geometry]\nF = \"1 - y2^2\"\nL = abc\n",
    "not an ini file",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        study.StudyConfig.from_string(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        study.StudyConfig.from_file(tmp_path / "nope.cfg")


def test_invalid_geometry_fails_check():
    cfg = study.StudyConfig.from_string("[geometry]\nF = \"1 - y1/2 - y2^2\"\nL = 1\n")
    with pytest.raises(ValidationFailure):
        study.check_config(cfg)


def test_workers_environment(monkeypatch):
    cfg = study.StudyConfig.from_string(FAST_FLAT)
    monkeypatch.setenv(study.WORKERS_ENV, "3")
    assert cfg.effective_workers() == 3
    monkeypatch.setenv(study.WORKERS_ENV, "x")
    with pytest.raises(ConfigError):
        cfg.effective_workers()


# -- decay rules ----------------------------------------------------------------------

def test_decay_rule():
    assert study.decays([1.0, 0.5, 0.26, 0.1])
    assert not study.decays([1.0, 0.9, 0.8])
    assert not study.decays([1.0, 0.4, 0.43, 0.1], step_tol=1.05)
    assert study.decays([1.0, 0.4, 0.41, 0.1], step_tol=1.05)
    assert not study.decays([1.0])
    assert not study.decays([1.0, math.nan])


def test_criteria_need_two_rows():
    assert all(v is None for v in study.evaluate_criteria([], {}, 1e-3).values())


# -- run and emit ----------------------------------------------------------------------

def test_flat_study_passes(flat_report):
    r = flat_report
    assert r.errors == []
    assert r.passed, r.criteria
    assert max(row["measure_gap"] for row in r.rows) <= 1e-12
    assert all(row["l2_error"] <= 1e-6 for row in r.rows)
    assert r.recompute_criteria() == r.criteria


def test_workers_do_not_change_results(flat_report, monkeypatch):
    monkeypatch.setenv(study.WORKERS_ENV, "2")
    again = study.run_study(study.StudyConfig.from_string(FAST_FLAT))
    assert again.rows == flat_report.rows


def test_emit_and_round_trip(flat_report, tmp_path):
    paths = study.emit(flat_report, tmp_path, include_timing=True)
    names = {p.name for p in paths}
    assert {"report.csv", "report.json"} | {f"{m}.dat" for m in study.METRICS} == names
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == study.CSV_COLUMNS
    assert len(rows) - 1 == len(flat_report.config["eps"])
    back = study.load_report(tmp_path / "report.json")
    assert back == flat_report
    data = np.loadtxt(tmp_path / "l2_error.dat")
    np.testing.assert_array_equal(data, flat_report.table("l2_error"))


def test_emit_is_deterministic_without_timing(flat_report, tmp_path):
    study.emit(flat_report, tmp_path / "a")
    study.emit(study.run_study(study.StudyConfig.from_string(FAST_FLAT)), tmp_path / "b")
    for name in ("report.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_eps_list_gives_header_only_csv(tmp_path):
    text = FAST_FLAT.replace("eps = 0.2, 0.1", "eps =")
    report = study.run_study(study.StudyConfig.from_string(text))
    study.emit(report, tmp_path)
    assert (tmp_path / "report.csv").read_text().strip() == ",".join(study.CSV_COLUMNS)
    assert all(v is None for v in report.criteria.values())


def test_failed_eps_row_is_recorded(tmp_path, monkeypatch):
    monkeypatch.setattr(study.epssolve, "MAX_DOFS", 1000)

    def capped(*args, **kw):
        kw["max_dofs"] = 500
        return original(*args, **kw)
    original = study.epssolve.solve_eps_problem
    monkeypatch.setattr(study.epssolve, "solve_eps_problem", capped)
    report = study.run_study(study.StudyConfig.from_string(FAST_FLAT))
    assert report.errors and not report.passed
    assert math.isnan(report.rows[-1]["l2_error"])
    study.emit(report, tmp_path)
    back = json.loads((tmp_path / "report.json").read_text())
    assert back["rows"][-1]["l2_error"] is None


# -- CLI ----------------------------------------------------------------------------------

def _write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_cli_validate(tmp_path, capsys):
    assert cli.main(["validate", "--config", _write(tmp_path, FAST_FLAT)]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True
    bad = _write(tmp_path, "[geometry]\nF = \"(1 - y2^2)^2\"\nL = 1\n", "bad.cfg")
    assert cli.main(["validate", "--config", bad]) == 1


def test_cli_usage_errors(tmp_path, capsys):
    assert cli.main(["validate", "--config", str(tmp_path / "missing.cfg")]) == 64
    assert cli.main([]) == 64
    assert cli.main(["frobnicate"]) == 64
    assert cli.main(["cell", "--config", _write(tmp_path, FAST_FLAT), "--x1", "2"]) == 64
    assert "usage" in capsys.readouterr().err


def test_cli_cell_and_effective(tmp_path, capsys):
    cfg = _write(tmp_path, FAST_FLAT)
    assert cli.main(["cell", "--config", cfg, "--x1", "0.5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["a_eff"] == pytest.approx(2.0, abs=1e-8)
    target = tmp_path / "u.csv"
    assert cli.main(["effective", "--config", cfg, "--elements", "16",
                     "--output", str(target)]) == 0
    data = np.loadtxt(target, delimiter=",", skiprows=1)
    assert data.shape == (17, 2)


def test_cli_solve_eps(tmp_path):
    cfg = _write(tmp_path, FAST_FLAT)
    prefix = tmp_path / "sol"
    assert cli.main(["solve-eps", "--config", cfg, "--eps", "0.5", "--output", str(prefix)]) == 0
    summary = json.loads((tmp_path / "sol.json").read_text())
    assert summary["n_x1"] == 32
    assert summary["energy_identity_gap"] <= 1e-8


def test_cli_verify_measure(tmp_path, capsys):
    cfg = _write(tmp_path, FAST_FLAT.replace("1 - y2^2", "1 + 0.5*cos(2*pi*y1) - abs(y2)"))
    code = cli.main(["verify-measure", "--config", cfg, "--eps", "0.2", "0.1", "0.05", "--strict"])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True


def test_cli_layered_study(tmp_path, capsys):
    cfg = _write(tmp_path, LAYERED)
    out = tmp_path / "out"
    assert cli.main(["study", "--config", cfg, "--output-dir", str(out), "--strict"]) == 0
    assert (out / "report.csv").exists() and (out / "report.json").exists()
    report = study.load_report(out / "report.json")
    a = np.array(report.effective["a_eff"])
    box = np.array(report.effective["box_measure"])
    np.testing.assert_allclose(a / box, np.sqrt(3.0), rtol=1e-3)
