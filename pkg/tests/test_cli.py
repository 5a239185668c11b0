import csv
import json
import os
import subprocess
import sys

import jsonschema
import pytest

from relaxctrl import cli, schemas
from relaxctrl.errors import ConfigError


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _validate(path, schema):
    jsonschema.validate(json.loads(path.read_text()), schema)


def test_minimal_config_defaults():
    cfg = cli.config_from_dict({"preset": "lq"})
    r = cfg.resolved()
    assert r["grid"] == {"dim": 1, "nx": 16, "extent": 1.0, "nt": 20, "T": 1.0}
    assert r["params"]["beta"] == 1e-3
    assert r["solver"]["max_iters"] == 500
    assert cli.config_from_dict({"preset": "composite"}).resolved()["solver"]["step_rule"] == "armijo"


@pytest.mark.parametrize("cfg,fragment", [
    ({"preset": "lq", "gridd": {}}, "gridd"),
    ({"preset": "lq", "grid": {"nt": 0}}, "grid.nt"),
    ({"preset": "lq", "grid": {"nx": 1}}, "grid.nx"),
    ({"preset": "lq", "solver": {"mp_tolerance": -1}}, "solver.mp_tolerance"),
    ({"preset": "lq", "solver": {"colour": 1}}, "solver.colour"),
    ({"preset": "nope"}, "unknown preset"),
    ({"preset": "lq", "params": {"beta": -1.0}}, "beta"),
    ({"preset": "lq", "params": {"gamma": 1.0}}, "gamma"),
    ({"preset": "lq", "chatter": {"levels": [0, 2]}}, "levels"),
    ({}, "preset"),
])
def test_config_errors_name_the_key(cfg, fragment):
    with pytest.raises(ConfigError, match=fragment):
        cli.config_from_dict(cfg)


def test_parse_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        cli.parse_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        cli.parse_config(bad)


def test_solve_outputs(tmp_path, capsys):
    cfg = _write(tmp_path, {"preset": "lq"})
    out = tmp_path / "run"
    assert cli.main(["solve", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("report.json", "control.json", "state.csv", "adjoint.csv", "profiles.csv"):
        assert (out / name).exists()
    _validate(out / "report.json", schemas.SOLVE_REPORT)
    jsonschema.validate(json.loads((out / "control.json").read_text()), schemas.CONTROL)
    rows = list(csv.reader(l for l in (out / "state.csv").read_text().splitlines() if not l.startswith("#")))
    assert rows[0][:2] == list(schemas.TRAJECTORY_CSV_COLUMNS) and len(rows) == 1 + 21
    assert "converged" in capsys.readouterr().out


def test_solve_iteration_limit_exit_code(tmp_path):
    cfg = _write(tmp_path, {"preset": "lq", "solver": {"max_iters": 0}})
    assert cli.main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    rep = json.loads((tmp_path / "o" / "report.json").read_text())["payload"]["report"]
    assert rep["termination"] == "max_iters"


def test_unwritable_output_exit_code(tmp_path):
    cfg = _write(tmp_path, {"preset": "lq"})
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["solve", "--config", str(cfg), "--out", str(blocker / "sub")]) == 1


def test_config_error_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, {"preset": "lq", "gridd": 1})
    assert cli.main(["solve", "--config", str(cfg)]) == 1
    assert "gridd" in capsys.readouterr().err


def test_seed_override_and_determinism(tmp_path):
    cfg = _write(tmp_path, {"preset": "lq", "dictionary": {"strategy": "bang", "count": 4}, "seed": 1})
    blobs = []
    for run, seed in (("a", 9), ("b", 9), ("c", 10)):
        assert cli.main(["solve", "--config", str(cfg), "--out", str(tmp_path / run), "--seed", str(seed)]) in (0, 2)
        payload = json.loads((tmp_path / run / "report.json").read_text())["payload"]
        blobs.append(json.dumps(payload, sort_keys=True))
        assert payload["config"]["seed"] == seed
    assert blobs[0] == blobs[1] and blobs[0] != blobs[2]
    for name in ("control.json", "state.csv", "adjoint.csv", "profiles.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_coarse_structure(tmp_path):
    cfg = _write(tmp_path, {"preset": "lq", "structure": "coarse", "grid": {"nx": 8, "nt": 6}})
    assert cli.main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    ctrl = json.loads((tmp_path / "o" / "control.json").read_text())
    assert ctrl["kind"] == "spacetime_young_measure"


def test_verify_lq_passes(tmp_path):
    cfg = _write(tmp_path, {"preset": "lq"})
    assert cli.main(["verify", "--config", str(cfg), "--out", str(tmp_path / "v")]) == 0
    _validate(tmp_path / "v" / "verify.json", schemas.VERIFY_REPORT)
    payload = json.loads((tmp_path / "v" / "verify.json").read_text())["payload"]
    assert {c["name"] for c in payload["checks"]} == {"gradient", "maximum_principle", "hamiltonian_constancy",
                                                       "choquet_panel", "fine_coarse_witness"}


def test_verify_broken_preset_fails(tmp_path):
    cfg = _write(tmp_path, {"preset": "broken", "verify": {"constancy": False}})
    assert cli.main(["verify", "--config", str(cfg), "--out", str(tmp_path / "v")]) == 2
    payload = json.loads((tmp_path / "v" / "verify.json").read_text())["payload"]
    grad = next(c for c in payload["checks"] if c["name"] == "gradient")
    assert not grad["passed"] and grad["value"] > 1e-3


def test_chatter_ladder(tmp_path):
    cfg = _write(tmp_path, {"preset": "chatter"})
    assert cli.main(["chatter", "--config", str(cfg), "--levels", "2,4,8,16", "--out", str(tmp_path / "c")]) == 0
    _validate(tmp_path / "c" / "chatter.json", schemas.CHATTER_REPORT)
    rows = list(csv.DictReader((tmp_path / "c" / "chatter.csv").open()))
    assert [int(r["k"]) for r in rows] == [2, 4, 8, 16]
    gaps = [float(r["gap"]) for r in rows]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_chatter_dirac_optimum_has_zero_gap(tmp_path):
    cfg = _write(tmp_path, {"preset": "convex", "chatter": {"levels": [1, 3]}})
    assert cli.main(["chatter", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
    payload = json.loads((tmp_path / "c" / "chatter.json").read_text())["payload"]
    assert all(r["gap"] == 0.0 and r["gap_to_optimum"] == 0.0 for r in payload["rows"])


def test_bad_levels_argument(tmp_path):
    cfg = _write(tmp_path, {"preset": "chatter"})
    with pytest.raises(SystemExit):
        cli.main(["chatter", "--config", str(cfg), "--levels", "2,x"])


def test_presets_table(capsys):
    rows = cli.list_presets()
    jsonschema.validate(rows, schemas.PRESETS_TABLE)
    names = {r["name"] for r in rows}
    assert {"lq", "chatter", "composite"} <= names
    assert cli.main(["presets", "--json"]) == 0
    assert json.loads(capsys.readouterr().out) == rows


def test_module_entry_point(tmp_path):
    env = dict(os.environ, RELAXCTRL_PURE_PYTHON="1")
    res = subprocess.run([sys.executable, "-m", "relaxctrl", "presets"], capture_output=True, text=True, env=env)
    assert res.returncode == 0 and "chatter" in res.stdout


def test_shipped_configs_parse():
    from pathlib import Path
    cfg_dir = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(cfg_dir.glob("*.json"))
    assert files
    for f in files:
        cli.parse_config(f)
