import json
import subprocess
import sys

import pytest

from ppdelab.cli import EXIT_FAIL, EXIT_INVALID, EXIT_PASS, EXIT_RUNTIME, main
from ppdelab.errors import ConfigError
from ppdelab.experiments import ExperimentConfig, body_json, load_config, run, validate


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def small(kind, **kw):
    doc = {"kind": kind, "seed": 1, "grid": {"m": 8}, "N": 2000, "roots": 512}
    doc.update(kw)
    return doc


def test_value_zero_model_is_exact(tmp_path, capsys):
    cfg = write(tmp_path, small("value", model={"name": "zero"}, method="nested", query={"x": [0.3]},
                                tolerances={"z": 3}))
    assert main(["value", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_PASS
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["body"]["results"]["value"]["estimator"] == "exact"
    assert "wall_clock_s" in rep and "wall_clock_s" not in rep["body"]


def test_solve_writes_backward_csv(tmp_path):
    cfg = write(tmp_path, small("solve", model={"name": "bm"}, query={"x": [0.5]}, tolerances={"z": 4, "abs": 0.01}))
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_PASS
    body = json.loads((tmp_path / "o" / "report.json").read_text())["body"]
    assert body["artifacts"] == ["backward.csv"]
    assert (tmp_path / "o" / "backward.csv").read_text().startswith("sample,node,Y,Z0")


def test_failing_tolerance_exits_one(tmp_path):
    cfg = write(tmp_path, small("value", model={"name": "zero"}, method="nested", query={"x": [0.3]},
                                tolerances={"expected": 5.0, "abs": 0.1}))
    assert main(["value", "--config", cfg]) == EXIT_FAIL


def test_invalid_config_lists_every_problem(tmp_path, capsys):
    cfg = write(tmp_path, {"kind": "value", "model": {"name": "nope"}, "grid": {"m": 0}, "method": "magic", "threads": 0})
    assert main(["value", "--config", cfg]) == EXIT_INVALID
    err = capsys.readouterr().err
    for fld in ("seed:", "model.name:", "grid.m:", "method:", "threads:"):
        assert fld in err


def test_unknown_field_and_bad_json(tmp_path):
    assert main(["value", "--config", write(tmp_path, {"kind": "value", "seed": 1, "bogus": 1})]) == EXIT_INVALID
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["value", "--config", str(bad)]) == EXIT_INVALID
    assert main(["value", "--config", str(tmp_path / "missing.json")]) == EXIT_INVALID


def test_kind_mismatch(tmp_path):
    assert main(["dpp", "--config", write(tmp_path, small("value"))]) == EXIT_INVALID


def test_lattice_over_budget_rejected(tmp_path, capsys):
    cfg = write(tmp_path, small("nlexp", lattice={"k": 3, "m": 14, "L": 1.0}))
    assert main(["nlexp", "--config", cfg]) == EXIT_INVALID
    assert "lattice:" in capsys.readouterr().err


def test_runtime_error_exit(tmp_path):
    # the nested tree exceeds its node budget at run time
    cfg = write(tmp_path, small("value", method="nested", roots=100_000, budget=1000))
    assert main(["value", "--config", cfg]) == EXIT_RUNTIME


def test_seed_override_changes_body(tmp_path, capsys):
    cfg = write(tmp_path, small("value", method="lsmc", query={"x": [0.1]}))
    main(["value", "--config", cfg, "--seed", "1"])
    a = json.loads(capsys.readouterr().out)["body"]
    main(["value", "--config", cfg, "--seed", "2"])
    b = json.loads(capsys.readouterr().out)["body"]
    assert a["results"]["value"]["value"] != b["results"]["value"]["value"]


@pytest.mark.parametrize("doc", [
    small("value", method="nested", query={"x": [0.2]}),
    small("simulate-forward", model={"name": "path_drift"}, N=50),
    small("dpp", model={"name": "bm"}, N=500, tau={"kind": "hitting", "eps": 0.3}),
    small("nlexp", lattice={"k": 1, "m": 4, "L": 1.0}, functional="abs_terminal", sense="upper"),
    small("snell", lattice={"k": 1, "m": 4, "L": 1.0}, functional="running_max"),
    small("residual", model={"name": "bm"}, extra={"candidate": "bm_quadrature"},
          points=[{"t": 0.5, "omega": [[0, 0]] + [[0, 0.3]] * 8}]),
    small("assumptions", model={"name": "lookback"}, N=500),
])
def test_bodies_are_byte_identical(doc, tmp_path):
    cfg = ExperimentConfig.from_dict(doc)
    a = run(cfg, str(tmp_path))
    b = run(ExperimentConfig.from_dict(doc), str(tmp_path))
    assert body_json(a) == body_json(b)
    assert a["body"]["passed"] in (True, None)


def test_dpp_experiment_passes(tmp_path):
    cfg = write(tmp_path, small("dpp", model={"name": "linear_driver"}, N=2000))
    assert main(["dpp", "--config", cfg]) == EXIT_PASS


def test_nlexp_expected_value(tmp_path):
    cfg = write(tmp_path, small("nlexp", lattice={"k": 1, "m": 4, "L": 1.0}, functional="terminal", sense="upper",
                                tolerances={"expected": 1.0, "abs": 1e-12}))
    assert main(["nlexp", "--config", cfg]) == EXIT_PASS


def test_viscosity_experiment(tmp_path):
    doc = small("viscosity", grid={"m": 16}, roots=20_000, lattice={"L": 2.0, "eps": 0.5, "m": 4},
                tolerances={"membership": 0.02})
    assert main(["viscosity", "--config", write(tmp_path, doc)]) == EXIT_PASS


def test_viscosity_needs_bm(tmp_path):
    doc = small("viscosity", model={"name": "lookback"})
    assert main(["viscosity", "--config", write(tmp_path, doc)]) == EXIT_INVALID


def test_validate_and_load(tmp_path):
    assert validate(ExperimentConfig.from_dict(small("value"))) == []
    with open(write(tmp_path, small("dpp", tau={"kind": "fixed", "time": 0.3}))) as fh:
        assert any(d.startswith("tau.time") for d in validate(load_config(fh)))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"seed": 1})


def test_console_script(tmp_path):
    cfg = write(tmp_path, small("value", model={"name": "zero"}, method="nested", query={"x": [0.0]}))
    proc = subprocess.run([sys.executable, "-m", "ppdelab.cli", "value", "--config", cfg], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["body"]["results"]["value"]["value"] == 0.0
