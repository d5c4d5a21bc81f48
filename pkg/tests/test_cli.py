import csv
import io
import json
import math
import subprocess
import sys

import pytest

from treeaoi import cli
from treeaoi.cli import COLUMNS, main


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_analyze_grid(capsys):
    code, out, _ = run(["analyze", "-U", "100", "--rho-u", "0.1,0.4", "--lmax", "2,inf"], capsys)
    assert code == 0
    assert out.splitlines()[0] == ",".join(COLUMNS)
    rows = rows_of(out)
    assert [(r["rhoU"], r["lmax"]) for r in rows] == [("0.1", "2"), ("0.1", "inf"), ("0.4", "2"), ("0.4", "inf")]
    assert all(r["mode"] == "analyze" and r["seed_count"] == "0" for r in rows)
    for r in rows:
        assert float(r["delta_norm"]) == pytest.approx(float(r["delta"]) / 100)


def test_range_syntax(capsys):
    code, out, _ = run(["analyze", "-U", "20", "--rho-u", "0.1:0.3:0.1", "--lmax", "3:4"], capsys)
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 6
    assert sorted({float(r["rhoU"]) for r in rows}) == pytest.approx([0.1, 0.2, 0.3])


def test_single_user_mean_refresh_column(capsys):
    code, out, _ = run(["analyze", "-U", "1", "--rho", "0.25", "--lmax", "5"], capsys)
    assert code == 0
    assert float(rows_of(out)[0]["mean_Y"]) == pytest.approx(4.0)


def test_config_errors(capsys):
    assert run(["analyze", "--rho-u", ""], capsys)[0] == 1
    assert run(["analyze", "-U", "10"], capsys)[0] == 1  # no rate given
    assert run(["analyze", "--rho", "1.5"], capsys)[0] == 1
    assert run(["analyze", "--rho", "0.1", "--lmax", "1"], capsys)[0] == 1
    assert run(["analyze", "--rho", "0.1", "--rho-u", "0.2"], capsys)[0] == 1
    assert run(["simulate", "--rho", "0.1", "--horizon", "100", "--warmup", "200"], capsys)[0] == 1
    assert run(["nonsense"], capsys)[0] == 1
    assert run(["--help"], capsys)[0] == 0


def test_numeric_failure_reports_nan_row(capsys, caplog, monkeypatch):
    real = cli.average_aoi

    def flaky(cfg):
        if cfg.l_max == 3:
            raise ArithmeticError("boom")
        return real(cfg)

    monkeypatch.setattr(cli, "average_aoi", flaky)
    code, out, _ = run(["analyze", "-U", "10", "--rho-u", "0.3", "--lmax", "2,3"], capsys)
    assert code == 2
    rows = rows_of(out)
    assert rows[0]["delta"] != "nan" and rows[1]["delta"] == "nan"
    assert "failed" in caplog.text


@pytest.mark.property
def test_simulate_reproducible(tmp_path, capsys):
    argv = ["simulate", "-U", "20", "--rho-u", "0.4", "--lmax", "4", "--horizon", "60000",
            "--warmup", "10000", "--seeds", "2", "--seed", "5"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(argv + ["-o", str(a)]) == 0
    assert main(argv + ["-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    row = rows_of(a.read_text())[0]
    assert row["mode"] == "simulate" and row["seed_count"] == "2"
    assert float(row["stderr_delta"]) > 0


def test_simulate_with_analysis(capsys):
    code, out, _ = run(["simulate", "-U", "10", "--rho-u", "0.3", "--lmax", "3", "--horizon", "50000",
                        "--with-analysis"], capsys)
    assert code == 0
    rows = rows_of(out)
    assert [r["mode"] for r in rows] == ["analyze", "simulate"]
    assert float(rows[1]["delta"]) == pytest.approx(float(rows[0]["delta"]), rel=0.1)


def test_workers_keep_order(capsys):
    argv = ["analyze", "-U", "30", "--rho-u", "0.2,0.5,0.8", "--lmax", "2,6"]
    _, serial, _ = run(argv, capsys)
    _, parallel, _ = run(argv + ["--workers", "3"], capsys)
    assert serial == parallel


def test_json_mirrors_csv(capsys):
    argv = ["analyze", "-U", "50", "--rho-u", "0.3", "--lmax", "2,inf"]
    _, text, _ = run(argv, capsys)
    _, js, _ = run(argv + ["--format", "json"], capsys)
    records = json.loads(js)
    for row, rec in zip(rows_of(text), records):
        assert list(rec) == COLUMNS
        for k in COLUMNS:
            if k in ("lmax", "mode"):
                assert rec[k] == row[k]
            else:
                assert float(rec[k]) == pytest.approx(float(row[k]), rel=1e-11)


def test_optimize_single_row(capsys):
    code, out, _ = run(["optimize", "-U", "100", "--rho-u", "0.8", "--lmax", "2:6"], capsys)
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 1
    assert rows[0]["mode"] == "optimize" and rows[0]["lmax"] == "2"
    code, out, _ = run(["optimize", "-U", "100", "--rho-u", "0.05", "--lmax", "2:6"], capsys)
    assert rows_of(out)[0]["lmax"] == "inf"


def test_config_file_overridden_by_flags(tmp_path, capsys):
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps({"users": [10], "rho_u": [0.2, 0.4], "lmax": "3"}))
    _, out, _ = run(["analyze", "--config", str(path)], capsys)
    assert [r["lmax"] for r in rows_of(out)] == ["3", "3"]
    _, out, _ = run(["analyze", "--config", str(path), "--lmax", "5", "-U", "20"], capsys)
    rows = rows_of(out)
    assert {r["lmax"] for r in rows} == {"5"} and {r["U"] for r in rows} == {"20"}
    assert run(["analyze", "--config", str(tmp_path / "missing.json")], capsys)[0] == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "treeaoi", "analyze", "-U", "5", "--rho", "0.1", "--lmax", "2"],
                         capture_output=True, text=True, check=True)
    row = rows_of(res.stdout)[0]
    assert math.isfinite(float(row["delta"]))
