import filecmp
import json

import pytest

from skir_graphon.cli import EXIT_INVALID, EXIT_IO, EXIT_NOT_CONVERGED, EXIT_OK, main, num


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_number_format():
    assert num(2.25) == "2.25000000"
    assert num(1.0 / 3.0) == "0.333333333"
    assert num(1.83e-14) == "1.83000000e-14"


def test_solve_happy_path(tmp_path, capsys):
    code, out, _ = run(capsys, "solve", "--config", "experiment1-policy0.cfg", "--out", str(tmp_path))
    assert code == EXIT_OK
    assert (tmp_path / "experiment1-policy0.csv").is_file()
    for path in tmp_path.iterdir():
        assert f"wrote {path}" in out
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["scenarios"]["experiment1-policy0"]["converged"] is True


def test_check_existence_unit_bound(capsys):
    code, out, _ = run(capsys, "check-existence", "--config", "existence-t1")
    assert code == EXIT_OK
    assert "existence value 2.25000000" in out
    assert out.rstrip().endswith("NOT SATISFIED")


def test_check_existence_short_horizon(capsys):
    code, out, _ = run(capsys, "check-existence", "--config", "existence-t01.cfg", "--quiet")
    assert code == EXIT_OK
    assert out.splitlines() == ["existence value 0.225000000", "SATISFIED"]


def test_experiment1_with_plots(tmp_path, capsys):
    code, out, _ = run(capsys, "experiment1", "--policies", "0,2", "--plots", "--out", str(tmp_path))
    assert code == EXIT_OK
    csvs = sorted(p.name for p in tmp_path.glob("*.csv"))
    assert csvs == ["delta_experiment1-policy0_vs_experiment1-policy2.csv",
                    "experiment1-policy0.csv", "experiment1-policy2.csv"]
    svgs = list(tmp_path.glob("*.svg"))
    assert len(svgs) == 4
    assert b"<dc:date>" not in svgs[0].read_bytes()


def test_experiment2_subset(tmp_path, capsys):
    code, out, _ = run(capsys, "experiment2", "--schemes", "0,4", "--out", str(tmp_path), "--quiet")
    assert code == EXIT_OK
    assert (tmp_path / "delta_experiment2-scheme0_vs_experiment2-scheme4.csv").is_file()


def test_verify_reports_each_check(capsys):
    code, out, _ = run(capsys, "verify", "--config", "experiment1-policy0", "--seed", "1")
    assert code == EXIT_OK
    for name in ("analytic", "exploitability", "perturbed", "monte-carlo"):
        assert f"PASS  {name}:" in out
    assert "N=500" in out


def test_verify_skips_analytic_with_relapse(capsys):
    code, out, _ = run(capsys, "verify", "--config", "experiment2-scheme1", "--quiet")
    assert code == EXIT_OK
    assert "SKIP  analytic" in out


def test_simulate_writes_outputs(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--config", "experiment1-policy0", "--out", str(tmp_path),
                       "--n-agents", "300", "--seed", "2")
    assert code == EXIT_OK
    occ = tmp_path / "experiment1-policy0_simulation.csv"
    lines = occ.read_text().splitlines()
    assert lines[0] == "t,block,state,count,p_empirical,p_mean_field"
    assert len(lines) == 1 + 1001 * 16
    assert (tmp_path / "experiment1-policy0_costs.csv").is_file()


def test_non_convergence_exit_code(tmp_path, capsys):
    cfg = tmp_path / "short.toml"
    from skir_graphon.experiments import SCENARIO_DIR
    text = (SCENARIO_DIR / "experiment1-policy0.toml").read_text().replace("max_iters = 500", "max_iters = 2")
    cfg.write_text(text)
    code, out, _ = run(capsys, "solve", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == EXIT_NOT_CONVERGED
    assert "NOT CONVERGED" in out
    assert (tmp_path / "o" / "short.csv").is_file()


def test_validation_errors(tmp_path, capsys):
    assert run(capsys, "solve")[0] == EXIT_INVALID
    assert run(capsys, "experiment1", "--policies", "0,7", "--out", str(tmp_path))[0] == EXIT_INVALID
    assert run(capsys, "experiment1", "--policies", "a,b")[0] == EXIT_INVALID
    assert run(capsys, "frobnicate")[0] == EXIT_INVALID
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid]\nT = 1.0\nn_steps = 10\nfoo = 2\n")
    code, _, err = run(capsys, "solve", "--config", str(bad), "--out", str(tmp_path))
    assert code == EXIT_INVALID and "grid" in err
    assert not list(tmp_path.glob("*.csv"))


def test_io_errors(tmp_path, capsys):
    code, _, err = run(capsys, "solve", "--config", "missing-preset", "--out", str(tmp_path))
    assert code == EXIT_IO and "missing-preset" in err
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    code, _, err = run(capsys, "solve", "--config", "existence-t01", "--out", str(blocker / "x"))
    assert code == EXIT_IO


def test_repeated_invocations_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "experiment1", "--policies", "0,1", "--out", str(tmp_path / d), "--quiet")[0] == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
