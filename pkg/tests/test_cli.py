import csv
import json

import numpy as np
import pytest

from branched_rde.cli import main
from branched_rde.config import config_hash, load_config, resolved
from branched_rde.solver import exact_ode


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash: ")
    rows = list(csv.reader(lines[1:]))
    return lines[0].split(": ")[1], rows[0], np.array(rows[1:], dtype=float)


# ---------------------------------------------------------------- config


def test_defaults_resolve():
    for cmd in ("algebra-check", "lift", "solve", "bounds", "small-time", "mc-tails"):
        cfg = load_config(cmd, None)
        data = resolved(cfg)
        assert data["schema_version"] == 1
        assert len(config_hash(data)) == 64


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "stpes": 10}))
    with pytest.raises(Exception):
        load_config("solve", p)


def test_schema_version_pinned():
    with pytest.raises(Exception):
        load_config("solve", None, {"schema_version": 2})


def test_overrides_nested():
    cfg = load_config("solve", None, {"sigma.kind": "zero", "m": 2.0})
    assert cfg.sigma.kind == "zero" and cfg.m == 2.0


def test_hash_changes_with_config():
    a = config_hash(resolved(load_config("solve", None)))
    b = config_hash(resolved(load_config("solve", None, {"m": 2.5})))
    assert a != b


# ---------------------------------------------------------------- algebra-check


def test_algebra_small(capsys, tmp_path):
    code, out, _ = run(capsys, "algebra-check", "--max-order", 3, "--d", 1, "--out", tmp_path)
    assert code == 0
    assert "PASS adjointness" in out and "pairs" in out
    report = json.loads((tmp_path / "algebra_check.json").read_text())
    assert report["passed"] and len(report["config_hash"]) == 64


def test_algebra_order_zero(capsys, tmp_path):
    code, out, _ = run(capsys, "algebra-check", "--max-order", 0, "--out", tmp_path)
    assert code == 0


def test_algebra_fault(capsys, tmp_path):
    code, out, _ = run(capsys, "algebra-check", "--max-order", 3, "--d", 1, "--inject-fault", "--out", tmp_path)
    assert code == 1
    assert "FAIL adjointness" in out and "ft=[1:] f=[1:] g=" in out


def test_algebra_budget(capsys, tmp_path):
    code, _, err = run(capsys, "algebra-check", "--max-order", 7, "--out", tmp_path)
    assert code == 2
    assert "triples" in err


# ---------------------------------------------------------------- lift / solve


def test_lift_outputs(capsys, tmp_path):
    code, _, _ = run(capsys, "lift", "--out", tmp_path, "--set", "driver.n=32")
    assert code == 0
    lift = json.loads((tmp_path / "lift.json").read_text())
    assert "[0.0,1.0]" in lift["increments"]
    digest, header, data = read_csv(tmp_path / "driver.csv")
    assert digest == lift["config_hash"]
    assert data.shape == (33, 2)


def test_solve_zero_sigma(capsys, tmp_path):
    code, _, _ = run(capsys, "solve", "--out", tmp_path, "--set", 'sigma.kind="zero"', "--set", "y0=[1000.0]",
                     "--set", "steps=256")
    assert code == 0
    _, header, data = read_csv(tmp_path / "solution.csv")
    assert header == ["t", "y1", "ode1"]
    exact = np.array([exact_ode(np.array([1000.0]), t, 3.0)[0] for t in data[:, 0]])
    np.testing.assert_allclose(data[:, 1], exact, rtol=1e-6)
    np.testing.assert_allclose(data[:, 2], exact, rtol=1e-12)
    sol = json.loads((tmp_path / "solution.json").read_text())
    assert sol["N"] == 2 and "1" in sol["remainder_norms"]


def test_solve_deterministic(capsys, tmp_path):
    args = ["solve", "--set", 'driver.kind="fbm"', "--seed", 7, "--set", "steps=128"]
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    for name in ("solution.csv", "solution.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert run(capsys, *args[:-3], "8", *args[-2:], "--out", tmp_path / "c")[0] == 0
    assert (tmp_path / "c" / "solution.csv").read_bytes() != (tmp_path / "a" / "solution.csv").read_bytes()


def test_missing_driver_file(capsys, tmp_path):
    missing = tmp_path / "nowhere.csv"
    code, _, err = run(capsys, "solve", "--out", tmp_path, "--set", 'driver.kind="csv"',
                       "--set", f'driver.path="{missing}"')
    assert code == 2
    assert "nowhere.csv" in err


def test_missing_config(capsys, tmp_path):
    code, _, err = run(capsys, "solve", "--config", tmp_path / "none.json", "--out", tmp_path)
    assert code == 2 and "none.json" in err


def test_config_file_round_trip(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema_version": 1, "steps": 64, "sigma": {"kind": "constant"}}))
    code, _, _ = run(capsys, "solve", "--config", cfg, "--out", tmp_path / "o")
    assert code == 0
    sol = json.loads((tmp_path / "o" / "solution.json").read_text())
    assert sol["config"]["steps"] == 64


def test_numerical_abort_exit(capsys, tmp_path):
    code, _, err = run(capsys, "solve", "--out", tmp_path, "--set", 'sigma.kind="linear"',
                       "--set", 'sigma.params={"A": [[[300.0]]]}', "--set", "drift=false")
    assert code == 3 and "numerical abort" in err


def test_no_temp_files_left(capsys, tmp_path):
    run(capsys, "solve", "--out", tmp_path, "--set", "steps=32")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["solution.csv", "solution.json"]


# ---------------------------------------------------------------- experiments


def test_bounds_default(capsys, tmp_path):
    code, out, _ = run(capsys, "bounds", "--out", tmp_path)
    assert code == 0 and "PASS" in out
    rep = json.loads((tmp_path / "bounds.json").read_text())
    assert rep["spread"] < 4 and rep["passed"]
    _, header, data = read_csv(tmp_path / "bounds.csv")
    assert data.shape == (12, 5)


def test_bounds_gamma_rejected(capsys, tmp_path):
    code, _, err = run(capsys, "bounds", "--out", tmp_path, "--set", 'mode="polynomial"', "--set", "gamma=1.9")
    assert code == 2 and "gamma" in err
    assert not tmp_path.exists() or not any(tmp_path.iterdir())


def test_bounds_fail_exit(capsys, tmp_path):
    code, out, _ = run(capsys, "bounds", "--out", tmp_path, "--set", "spread_limit=1.01")
    assert code == 1 and "FAIL" in out


def test_small_time(capsys, tmp_path):
    code, out, _ = run(capsys, "small-time", "--out", tmp_path, "--set", "drivers=2", "--set", "steps=16",
                       "--threads", 2)
    assert code == 0 and "40 runs, 0 violations" in out
    rep = json.loads((tmp_path / "small_time.json").read_text())
    assert {r["driver"] for r in rep["runs"]} == {0, 1}


def test_mc_warns(capsys, tmp_path):
    code, _, err = run(capsys, "mc-tails", "--out", tmp_path, "--set", "seeds=8", "--set", "n=64",
                       "--set", "steps=64")
    assert code == 0
    assert "statistically meaningless" in err
    rep = json.loads((tmp_path / "tails.json").read_text())
    assert rep["seeds"] == 8 and rep["warnings"]
    _, header, data = read_csv(tmp_path / "survival.csv")
    assert header == ["x", "survival"] and len(data) == 8


def test_mc_config_validation(capsys, tmp_path):
    code, _, _ = run(capsys, "mc-tails", "--out", tmp_path, "--set", "H=0.2", "--set", "alpha=0.15")
    assert code == 2
