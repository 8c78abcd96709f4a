import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ttncme.cli import (EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, ConfigError, compare,
                        config_from_dict, main, read_marginals)

CASCADE_TT_20 = "((0 1)((2 3)((4 5)((6 7)((8 9)((10 11)((12 13)((14 15)((16 17)(18 19))))))))))"


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _observables(out):
    with open(out / "observables.csv", newline="") as fh:
        return list(csv.DictReader(fh))


SMALL_PSTTN = {"model": "cascade:3", "solver": "psttn", "partition": "((0)((1)(2)))",
               "ranks": [3, 2], "bounds": {"upper": [8, 8, 8]}, "dt": 0.05, "t_end": 1.0,
               "output_times": [0.5, 1.0], "snapshots": True}


def test_run_psttn_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", _write(tmp_path, SMALL_PSTTN), "--out", str(out)]) == EXIT_OK
    rows = _observables(out)
    assert [float(r["time"]) for r in rows] == [0.5, 1.0]
    assert list(rows[0]) == ["time", "mass", "mean_S0", "mean_S1", "mean_S2",
                             "std_S0", "std_S1", "std_S2"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["memory_footprint"]["entries"] > 0 and "wall_time_s" in summary
    assert (out / "snapshot_0001.ttn").exists()
    for k, row in enumerate(rows):
        _, cols = read_marginals(str(out / f"marginals_{k:04d}.csv"))
        for c in cols:
            assert abs(c.sum() - float(row["mass"])) <= 1e-10
    assert "max_mass_error" in capsys.readouterr().out


def test_repeat_runs_are_byte_identical(tmp_path):
    cfg = _write(tmp_path, SMALL_PSTTN)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["run", "--config", cfg, "--out", str(b)]) == EXIT_OK
    for name in ("observables.csv", "marginals_0000.csv", "marginals_0001.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ssa = _write(tmp_path, {"model": "cascade:3", "solver": "ssa", "runs": 200, "seed": 5,
                            "t_end": 2.0, "bounds": {"upper": [8, 8, 8]}}, "ssa.json")
    assert main(["run", "--config", ssa, "--out", str(tmp_path / "s1")]) == EXIT_OK
    assert main(["run", "--config", ssa, "--out", str(tmp_path / "s2")]) == EXIT_OK
    assert ((tmp_path / "s1" / "observables.csv").read_bytes()
            == (tmp_path / "s2" / "observables.csv").read_bytes())


def test_compare_self_and_dense(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL_PSTTN)
    a = tmp_path / "a"
    main(["run", "--config", cfg, "--out", str(a)])
    res = compare(str(a), str(a))
    assert res["max_error"] == 0.0 and res["basis"] == "full"
    dense = dict(SMALL_PSTTN, solver="dense")
    del dense["partition"], dense["ranks"]
    d = tmp_path / "d"
    assert main(["run", "--config", _write(tmp_path, dense, "d.json"), "--out", str(d)]) == EXIT_OK
    assert main(["compare", str(a), str(d), "--out", str(tmp_path / "cmp")]) == EXIT_OK
    assert "max_error=" in capsys.readouterr().out
    with open(tmp_path / "cmp" / "errors.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and all(0 < float(r["error"]) < 0.1 for r in rows)


def test_compare_marginal_basis(tmp_path):
    ssa = {"model": "birth_death", "solver": "ssa", "runs": 500, "seed": 3, "t_end": 5.0,
           "bounds": {"upper": [40]}}
    dense = {"model": "birth_death", "solver": "dense", "dt": 0.01, "t_end": 5.0,
             "bounds": {"upper": [40]}}
    main(["run", "--config", _write(tmp_path, ssa, "s.json"), "--out", str(tmp_path / "s")])
    main(["run", "--config", _write(tmp_path, dense, "d.json"), "--out", str(tmp_path / "d")])
    res = compare(str(tmp_path / "s"), str(tmp_path / "d"))
    assert res["basis"] == "marginals" and res["final_error"] < 0.1


def test_dense_schloegl_mean(tmp_path):
    cfg = {"model": "schloegl", "solver": "dense", "scheme": "implicit", "dt": 0.1, "t_end": 500}
    out = tmp_path / "s"
    assert main(["run", "--config", _write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
    assert float(_observables(out)[0]["mean_S"]) == pytest.approx(169.46, abs=0.5)


def test_ode_solver(tmp_path):
    cfg = {"model": "schloegl", "solver": "ode", "dt": 1e-3, "t_end": 3.0, "x0": 250}
    out = tmp_path / "o"
    assert main(["run", "--config", _write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
    assert float(_observables(out)[0]["mean_S"]) == pytest.approx(400.0, abs=1e-6)


def test_footprint_command(capsys):
    assert main(["footprint", "--model", "cascade", "--partition", CASCADE_TT_20,
                 "--ranks", ",".join(["7"] * 9)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "ttn: entries=289513 bytes=2316104" in out and "MB=2.3161" in out
    assert "MB=1.06" in out and "e+31" in out


def test_validate_command(tmp_path, capsys):
    assert main(["validate", "--model", "lambda_phage", "--partition", "((0 1)((2 3)(4)))"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.strip().endswith("ok") and "reaction 9" in out
    doc = {"species": ["A", "B", "C"], "reactions": [{"stoich": [1, 0, 0], "constant": 1.0, "factors": [
        {"species": [0, 2], "form": "mm", "params": [1.0, 2.0]}]}]}
    model = _write(tmp_path, doc, "m.json")
    assert main(["validate", "--model", model, "--partition", "((0 2)(1))"]) == EXIT_OK
    assert main(["validate", "--model", model, "--partition", "((0 1)(2))"]) == EXIT_VALIDATION
    assert "reaction 0" in capsys.readouterr().err


@pytest.mark.parametrize("doc,match", [
    ({"solver": "dense"}, "model"),
    ({"model": "schloegl", "solver": "magic"}, "solver"),
    ({"model": "schloegl", "solver": "dense", "dt": "fast"}, "dt"),
    ({"model": "schloegl", "solver": "psttn"}, "partition"),
    ({"model": "schloegl", "solver": "dense", "dt": 0.03, "t_end": 1.0}, "multiple"),
    ({"model": "schloegl", "solver": "dense", "scheme": "exact"}, "scheme"),
    ({"model": "schloegl", "solver": "dense", "bounds": {"upper": [5, 5]}}, "bounds"),
    ({"model": "lambda_phage", "solver": "psttn", "partition": "((0 1)((2 3)(4)))",
      "ranks": [5]}, "partition"),
])
def test_config_errors(doc, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(doc)


def test_validation_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": "schloegl",\n "solver": }')
    assert main(["run", "--config", str(bad)]) == EXIT_VALIDATION
    assert "line 2" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_VALIDATION


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_exit_code(tmp_path, capsys):
    # explicit Euler far beyond its stability limit overflows
    cfg = {"model": "schloegl", "solver": "psttn", "partition": "((0))", "ranks": [],
           "dt": 1.0, "t_end": 400.0}
    assert main(["run", "--config", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err
    cfg = {"model": "schloegl", "solver": "dense", "scheme": "implicit", "dt": 10.0, "t_end": 10.0,
           "krylov": {"rtol": 1e-30, "restart": 2, "maxiter": 2}}
    assert main(["run", "--config", _write(tmp_path, cfg, "k.json"),
                 "--out", str(tmp_path / "k")]) == EXIT_NUMERICAL


def test_console_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ttncme", "validate", "--model", "schloegl"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "ok"


@pytest.mark.slow
def test_lambda_psttn_config_mass(tmp_path):
    # Fails under the boundary rule: see the leak analysis in the decisions ledger.
    cfg = {"model": "lambda_phage", "solver": "psttn", "partition": "((0 1)((2 3)(4)))",
           "ranks": [5, 5], "dt": 1e-2, "t_end": 10.0}
    out = tmp_path / "l"
    assert main(["run", "--config", _write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["memory_footprint"]["bytes"] == 32720
    assert summary["max_mass_error"] < 1e-5
    assert np.isfinite(float(_observables(out)[0]["mass"]))
