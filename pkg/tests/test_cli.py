import csv
import io
import shutil
import subprocess

import pytest

from storage_lagrange import QuadraticCost, Scenario, StorageSpec, TerminalCost, write_scenario
from storage_lagrange.cli import BENCH_COLUMNS, main


def _kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


@pytest.fixture
def analytic(tmp_path):
    path = tmp_path / "analytic.json"
    sc = Scenario(StorageSpec(1.0, 4.0, 1.0, 2.0), [QuadraticCost(1.0, 0.0)], TerminalCost(1.0, 4.0))
    write_scenario(sc, path)
    return str(path)


@pytest.fixture
def quad(tmp_path):
    path = str(tmp_path / "q.json")
    assert main(["generate", "quadratic", "--seed", "3", "--T", "12", "-o", path]) == 0
    return path


def test_solve_analytic(analytic, capsys):
    assert main(["solve", analytic]) == 0
    out = _kv(capsys.readouterr().out)
    assert abs(float(out["theta"]) - 1.0) <= 1e-3
    assert abs(float(out["net"]) + 1.0) <= 1e-3
    assert out["outcome"] == "COMPLETED"


def test_solve_bounds(analytic, capsys):
    assert main(["solve", analytic, "--variant", "bounds"]) == 0
    out = _kv(capsys.readouterr().out)
    assert float(out["theta_lo"]) <= float(out["theta_hi"]) + 2e-3
    assert float(out["p_lo"]) <= float(out["p_hi"])


def test_solve_horizon_writes_schedule(quad, tmp_path, capsys):
    csv_path = tmp_path / "sched.csv"
    assert main(["solve", quad, "--horizon", str(csv_path)]) == 0
    assert int(_kv(capsys.readouterr().out)["solves"]) >= 1
    assert len(csv_path.read_text().splitlines()) == 12 + 2
    assert main(["verify", quad, "--schedule", str(csv_path)]) == 0


def test_corrupt_file_is_an_input_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", str(bad)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["solve", str(tmp_path / "missing.json")]) == 2
    assert main(["solve"]) == 2


def test_verify_passes_and_detects_perturbation(quad, capsys):
    assert main(["verify", quad]) == 0
    assert capsys.readouterr().out.rstrip().endswith("PASS")
    assert main(["verify", quad, "--perturb", "0.5"]) == 4
    assert "FAIL" in capsys.readouterr().out


def test_verify_rejects_length_mismatch(quad, analytic, tmp_path):
    csv_path = tmp_path / "one.csv"
    assert main(["solve", analytic, "--horizon", str(csv_path)]) == 0
    assert main(["verify", quad, "--schedule", str(csv_path)]) == 2


@pytest.mark.parametrize("family", ["quadratic", "pwl"])
def test_bench_rows(family, tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", family, "--T-list", "50,100", "--J", "10", "--trials", "2", "-o", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert tuple(rows[0].keys()) == tuple(BENCH_COLUMNS)
    assert [int(r["T"]) for r in rows] == [50, 100]
    assert all(int(r["median_ns"]) > 0 for r in rows)
    assert rows[0]["ratio_to_prev"] == "" and float(rows[1]["ratio_to_prev"]) > 0


def test_bench_thread_env_is_validated(monkeypatch):
    monkeypatch.setenv("STORAGE_SOLVER_THREADS", "0")
    assert main(["bench", "quadratic", "--T-list", "10", "--trials", "1"]) == 2


def test_console_script(analytic):
    exe = shutil.which("storage-lagrange")
    if exe is None:
        pytest.skip("console script not installed")
    res = subprocess.run([exe, "solve", analytic], capture_output=True, text=True)
    assert res.returncode == 0 and "theta=" in res.stdout
