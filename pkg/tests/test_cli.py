import json

import pytest

from drmpc import cli
from drmpc.errors import SolverError


def test_run_writes_log_and_summary(tmp_path, capsys):
    out = tmp_path / "logs"
    code = cli.main(["run", "--preset", "mass_spring", "--seed", "7", "--out", str(out),
                     "--duration", "1"])
    assert code == 0
    assert (out / "episode_00_000.csv").exists()
    rows = json.loads((out / "summary.json").read_text())
    assert len(rows) == 1 and rows[0]["preset"] == "mass_spring"
    text = capsys.readouterr().out
    assert "rank condition" in text and "violation_rate" in text


def test_montecarlo_sweep_rows(tmp_path):
    code = cli.main(["montecarlo", "--preset", "inverted_pendulum", "--sweep",
                     "epsilon=0.01,1,100", "--realizations", "2", "--duration", "0.5",
                     "--out", str(tmp_path)])
    assert code == 0
    rows = json.loads((tmp_path / "summary.json").read_text())
    assert [r["sweep_value"] for r in rows] == [0.01, 1.0, 100.0]


def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"system": "mass_spring", "duration": 0.3, "epsilon": 2.0}))
    code = cli.main(["run", "--config", str(cfg), "--epsilon", "0.5", "--out",
                     str(tmp_path / "o")])
    assert code == 0


def test_dump_qp(tmp_path):
    code = cli.main(["dump-qp", "--preset", "mass_spring", "--out", str(tmp_path),
                     "--n-init", "3", "--max-samples", "3"])
    assert code == 0
    header = json.loads((tmp_path / "qp.json").read_text())
    assert header["n_samples"] == 3 and header["layout"]["n_H"] > 0
    assert (tmp_path / "qp.triplets").read_text().startswith("P ")


def test_validate_small(capsys):
    assert cli.main(["validate", "--small"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) >= 7 and all(l.startswith("[PASS]") for l in lines)


def test_unknown_preset_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--preset", "rocket"])
    assert exc.value.code == 2


def test_malformed_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_config_preset_conflict(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"system": "inverted_pendulum"}))
    assert cli.main(["run", "--config", str(cfg), "--preset", "mass_spring"]) == 2


def test_bad_sweep_exit_code():
    assert cli.main(["montecarlo", "--sweep", "epsilon"]) == 2
    assert cli.main(["montecarlo", "--sweep", "epsilon=a,b"]) == 2
    assert cli.main(["montecarlo", "--sweep", "horizon=1,2"]) == 2


def test_solver_failure_exit_code(monkeypatch, tmp_path):
    def boom(cfg, write=True):
        raise SolverError("diverged")

    monkeypatch.setattr(cli, "run_monte_carlo", boom)
    assert cli.main(["run", "--out", str(tmp_path)]) == 3


def test_failed_solve_status_exit_code(monkeypatch, tmp_path):
    from drmpc import closed_loop

    def broken(*args, **kwargs):
        raise SolverError("factorization failed")

    monkeypatch.setattr(closed_loop, "_resolve", broken)
    assert cli.main(["run", "--duration", "0.2", "--out", str(tmp_path)]) == 3
