import csv
import json
import subprocess
import sys

import pytest
import yaml

from fbsde_gauss.cli import main

SMALL_HEAT = {
    "name": "small-heat",
    "coefficients": {"f": "0", "sigma": "1", "g": "0", "h": "x"},
    "T": 1.0,
    "grid": {"J": 80, "K": 40},
    "mc": {"paths": 20000, "steps": 40, "seed": 3},
    "envelope": {"m": "empirical"},
    "verify": {"bootstrap": 30, "probes": [1.0, 2.0]},
}


def run(args, capsys=None):
    code = main([str(a) for a in args])
    if capsys is None:
        return code
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_check_pass_and_assumption_failure(configs, tmp_path, capsys):
    code, out, _ = run(["check", "--config", configs / "heat.yaml", "--out", tmp_path / "a"], capsys)
    assert code == 0 and json.loads(out)["passed"] is True
    assert (tmp_path / "a" / "assumptions_X.json").exists()
    code, out, _ = run(["check", "--config", configs / "sigma_x.yaml", "--out", tmp_path / "b"], capsys)
    assert code == 3
    items = json.loads(out)["items"]
    assert items["A1"]["status"] == "fail" and items["A1"]["witness"]["x"] == 0.0
    code, out, _ = run(["check", "--mode", "Y", "--config", configs / "heat.yaml",
                        "--out", tmp_path / "c"], capsys)
    assert code == 3


@pytest.mark.parametrize("patch, pointer", [
    ({"grid": {"J": 80, "K": 40, "spacing": 2}}, "/grid"),
    ({"mc": {"paths": "many"}}, "/mc/paths"),
    ({"T": -1.0}, "/T"),
    ({"coefficients": {"h": "2*(t+x"}}, "/coefficients/h"),
    ({"verify": {"times": [2.0]}}, "/verify/times"),
    ({"envelope": {"m": "exact"}}, "/envelope/m"),
])
def test_config_errors_name_a_pointer(write_config, tmp_path, capsys, patch, pointer):
    cfg = dict(SMALL_HEAT, **patch)
    code, _, err = run(["check", "--config", write_config(cfg), "--out", tmp_path / "o"], capsys)
    assert code == 1
    assert f"config error at {pointer}" in err


def test_parse_error_column_is_reported(write_config, tmp_path, capsys):
    cfg = dict(SMALL_HEAT, coefficients={"h": "2*(x+x"})
    _, _, err = run(["check", "--config", write_config(cfg), "--out", tmp_path / "o"], capsys)
    assert "column 7" in err


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(["check", "--config", tmp_path / "nope.yaml", "--out", tmp_path], capsys)
    assert code == 1 and "cannot read config" in err


def test_resolved_config_and_seed_override(write_config, tmp_path):
    out = tmp_path / "o"
    assert run(["check", "--config", write_config(SMALL_HEAT), "--out", out, "--seed", "99"]) == 0
    cfg = json.loads((out / "resolved_config.json").read_text())
    assert cfg["mc"]["seed"] == 99
    assert cfg["bounds"]["times"] == [0.25, 0.5, 1.0]
    assert cfg["verify"]["times"] == [1.0]
    assert cfg["grid"]["boundary"] == "dirichlet"
    meta = json.loads((out / "meta.json").read_text())
    assert meta["exit_code"] == 0 and meta["backend"] in ("numba", "numpy")


def test_solve_simulate_bounds_outputs(write_config, tmp_path):
    p = write_config(SMALL_HEAT)
    out = tmp_path / "o"
    assert run(["solve", "--config", p, "--out", out]) == 0
    sol = rows(out / "solution.csv")
    assert len(sol) == 41 * 81 and set(sol[0]) == {"t", "x", "u", "ux", "uxx"}
    assert abs(float(sol[100]["u"]) - float(sol[100]["x"])) < 1e-12
    assert (out / "curves.csv").exists()
    const = json.loads((out / "constants.json").read_text())
    assert const["nu"] == 1.0 and const["mu"] == 1.0

    assert run(["simulate", "--config", p, "--out", out]) == 0
    term = rows(out / "terminal.csv")
    assert len(term) == 20000 and set(term[0]) == {"path", "exited", "X", "Y", "Z"}

    assert run(["bounds", "--config", p, "--out", out]) == 0
    b = rows(out / "bounds.csv")
    for comp in ("X", "Y", "Z"):
        assert sum(r["component"] == comp for r in b) == 3
    x_rows = [r for r in b if r["component"] == "X"]
    assert [float(r["t"]) for r in x_rows] == [0.25, 0.5, 1.0]
    assert all(r["status"] == "ok" and float(r["lower"]) == float(r["t"]) for r in x_rows)
    # u_xx vanishes for the heat equation, so the Z envelope is refused
    z_rows = [r for r in b if r["component"] == "Z"]
    assert all(r["status"].startswith("refused") and "A8" in r["status"] for r in z_rows)
    assert all(r["lower"] == "" for r in z_rows)


def test_cache_hits_and_invalidation(write_config, tmp_path):
    p = write_config(SMALL_HEAT)
    run(["solve", "--config", p, "--out", tmp_path / "a"])
    run(["solve", "--config", p, "--out", tmp_path / "b"])
    assert json.loads((tmp_path / "b" / "meta.json").read_text())["cache"]["pde"] == "hit"
    p2 = write_config(dict(SMALL_HEAT, coefficients={"h": "x + 0.5"}), name="shift.yaml")
    run(["solve", "--config", p2, "--out", tmp_path / "c"])
    assert json.loads((tmp_path / "c" / "meta.json").read_text())["cache"]["pde"] == "miss"
    run(["solve", "--config", p, "--out", tmp_path / "d", "--no-cache"])
    assert json.loads((tmp_path / "d" / "meta.json").read_text())["cache"] == {}
    a = (tmp_path / "a" / "solution.csv").read_bytes()
    assert a == (tmp_path / "b" / "solution.csv").read_bytes()
    assert a == (tmp_path / "d" / "solution.csv").read_bytes()


def test_verify_small_heat(write_config, tmp_path):
    out = tmp_path / "v"
    assert run(["verify", "--config", write_config(SMALL_HEAT), "--out", out]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["verdict"] == "pass" and rep["exit_code"] == 0
    x = rep["components"]["X"]["1"]
    assert x["status"] == "pass" and x["envelope"]["passed"] and x["oracle"]["passed"]
    assert x["kde_integral"] == pytest.approx(1.0, abs=1e-3)
    assert {t["verdict"] for t in x["tails"]} <= {"pass", "inconclusive"}
    assert (out / "overlay_X_t1.svg").exists() and (out / "overlay_X_t1.csv").exists()
    assert rep["components"]["Z"]["1"]["status"] == "skipped"
    assert rep["malliavin"]["X"]["fraction"] == 1.0


def test_verify_detects_halved_L(write_config, tmp_path):
    cfg = dict(SMALL_HEAT, corruption={"halve_L": True})
    out = tmp_path / "v"
    assert run(["verify", "--config", write_config(cfg), "--out", out]) == 2
    rep = json.loads((out / "report.json").read_text())
    assert rep["verdict"] == "fail" and rep["corruption"]["halve_L"] is True


def test_module_entry_point(configs, tmp_path):
    r = subprocess.run([sys.executable, "-m", "fbsde_gauss", "check", "--config",
                        str(configs / "sigma_x.yaml"), "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 3
    r = subprocess.run([sys.executable, "-m", "fbsde_gauss", "--version"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "0.1.0" in r.stdout


def test_unused_keys_in_yaml_roundtrip(write_config):
    p = write_config(SMALL_HEAT)
    assert yaml.safe_load(p.read_text())["name"] == "small-heat"
