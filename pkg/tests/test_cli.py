import json

import pytest

from lazymg.cli import build_parser, main
from lazymg.experiments import read_csv


def test_run_writes_telemetry_and_returns_exit_code(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    out = tmp_path / "t.csv"
    cfg.write_text(f"setup = quadrant\ndepth = 2\nmax_cycles = 300\noutput = {out}\n")
    assert main(["run", "--config", str(cfg)]) == 0
    assert "converged" in capsys.readouterr().out
    assert read_csv(out)[-1]["status"] == "converged"
    assert main(["run", "--config", str(cfg), "--max-cycles", "2"]) == 2


def test_flags_and_overrides(tmp_path):
    out = tmp_path / "t.csv"
    code = main(["run", "--depth", "2", "--setup", "theta", "--override", "theta=16",
                 "--max-cycles", "3", "--gating", "off", "--output", str(out)])
    assert code == 2
    rows = read_csv(out)
    assert len(rows) == 3 and rows[0]["problem"] == "theta(16)"


def test_bad_config_returns_one(tmp_path, capsys):
    assert main(["run", "--override", "depth=zero"]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_sweep_through_run(tmp_path, capsys):
    out = tmp_path / "s.csv"
    code = main(["run", "--override", "experiment=sweep", "--override", "sweeps=2",
                 "--depth", "2", "--forced-task-fraction", "0.1", "--workers", "2",
                 "--output", str(out)])
    assert code == 0
    assert len(read_csv(out)) == 2


def test_table_and_compare(tmp_path, capsys):
    assert main(["table", "--thetas", "1", "--cycles", "2", "--depth", "2"]) == 0
    text = capsys.readouterr().out
    assert "factor theta=1" in text and "128.00" in text
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path, solver in ((a, "adafac-jac"), (b, "additive")):
        main(["run", "--depth", "2", "--solver", solver, "--max-cycles", "400",
              "--output", str(path)])
    capsys.readouterr()
    assert main(["compare", str(a), str(b), "--target", "1e-4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"a", "b", "b_minus_a"}
    assert main(["table", "--inputs", str(a)]) == 0
    assert "quadrant(eps_low=0.001)" in capsys.readouterr().out


def test_parser_rejects_unknown_choice():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "--assembly", "sometimes"])
