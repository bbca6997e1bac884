"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import filecmp
import json
import math
import time

import numpy as np
import pytest
import yaml
from scipy import stats

from fbsde_gauss.bounds import EnvelopeParams, envelope_density
from fbsde_gauss.cli import main
from fbsde_gauss.pde import Grid, solve_quasilinear
from fbsde_gauss.pipeline import Pipeline, load_config
from fbsde_gauss.sde import DrivingCoefficients, simulate_paths
from fbsde_gauss.verify import discrepancy_appendix


def _report(out):
    return json.loads((out / "report.json").read_text())


def test_criterion_1_heat(configs, tmp_path, acceptance):
    out = tmp_path / "heat"
    t0 = time.perf_counter()
    code = main(["verify", "--config", str(configs / "heat.yaml"), "--out", str(out),
                 "--no-cache"])
    elapsed = time.perf_counter() - t0
    rep = _report(out)
    pipe = Pipeline(load_config(configs / "heat.yaml"), use_cache=False)
    sol = pipe.solution
    pde_err = float(np.max(np.abs(sol.u - sol.grid.x[None, :])))
    checks = {"exit 0": code == 0, "u=x": pde_err <= 1e-10, "runtime": elapsed <= 60.0}
    for comp in ("X", "Y"):
        entry = rep["components"][comp]["1"]
        checks[f"{comp} l=L=t"] = entry["l"] == pytest.approx(1.0) and entry["L"] == pytest.approx(1.0)
        checks[f"{comp} envelope"] = entry["envelope"]["passed"]
        checks[f"{comp} oracle"] = entry["oracle"]["passed"]
        probes = sorted({t["x"] for t in entry["tails"]})
        checks[f"{comp} probes"] = probes == [0.5, 1.0, 2.0]
        checks[f"{comp} tails"] = all(t["verdict"] == "pass" for t in entry["tails"])
    bad = [k for k, v in checks.items() if not v]
    acceptance(1, not bad, f"sup|u-x|={pde_err:.1e}, runtime {elapsed:.1f}s, exit {code}"
               + (f", failed: {bad}" if bad else ""))
    assert not bad


def test_criterion_2_feynman_kac(configs, acceptance):
    cfg = load_config(configs / "drift.yaml")
    cs = Pipeline(cfg, use_cache=False).cs
    hw = float(cfg["grid"]["halfwidth"])
    z, w = np.polynomial.hermite_e.hermegauss(64)
    w = w / math.sqrt(2 * math.pi)
    bump = lambda x: np.tanh(x + 1) - np.tanh(x - 1)  # noqa: E731
    errs = []
    for n in (100, 200, 400):
        g = Grid(-hw, hw, n, 1.0, n)
        sol = solve_quasilinear(cs, g, with_derivatives=False)
        win = np.abs(g.x) <= 4.0
        err = 0.0
        for k in range(0, n, n // 4):
            tau = g.T - g.t[k]
            ref = (bump(g.x[win, None] + 0.5 * tau + math.sqrt(tau) * z[None, :]) * w).sum(axis=1)
            err = max(err, float(np.max(np.abs(sol.u[k, win] - ref))))
        errs.append(err)
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    ok = all(r >= 3.0 for r in ratios)
    acceptance(2, ok, "sup errors " + ", ".join(f"{e:.2e}" for e in errs)
               + ", ratios " + ", ".join(f"{r:.2f}" for r in ratios))
    assert ok


def test_criterion_3_malliavin_oracle(acceptance):
    dc = DrivingCoefficients.from_exprs("-x", "1", 1.0, x_lo=-10.0, x_hi=10.0)
    ps = simulate_paths(dc, 0.5, 10000, 1000, seed=2024, pairs=[(0.25, 0.75)])
    exact = math.exp(-0.5)
    d = ps.D[("first-variation", 0.25, 0.75)]
    rel = float(np.max(np.abs(d - exact)) / exact)
    rows = discrepancy_appendix(ps, analytic=lambda r, t: math.exp(-(t - r)))
    paper = rows[0]["paper-dx_vs_analytic_max_rel"]
    ok = rel <= 0.01 and paper > 0.0 and "paper-dx_vs_first_variation_max_rel" in rows[0]
    acceptance(3, ok, f"first-variation max rel err {rel:.1e}; paper-dx discrepancy {paper:.3f}")
    assert ok


def test_criterion_4_envelope_identity(acceptance):
    worst = 0.0
    for mean, L in ((0.0, 1.0), (0.3, 1.7), (-2.0, 0.05)):
        ep = EnvelopeParams(mean, math.sqrt(2 * L / math.pi), L, L)
        xs = np.linspace(mean - 5 * math.sqrt(L), mean + 5 * math.sqrt(L), 100)
        lo, hi = envelope_density(xs, ep)
        pdf = stats.norm.pdf(xs, mean, math.sqrt(L))
        worst = max(worst, float(np.max(np.abs(lo - pdf))), float(np.max(np.abs(hi - pdf))))
    ok = worst <= 1e-12
    acceptance(4, ok, f"max |envelope - pdf| = {worst:.1e}")
    assert ok


def test_criterion_5_comparison_curve(configs, acceptance):
    pipe = Pipeline(load_config(configs / "slope.yaml"), use_cache=False)
    rep = pipe.report("Y")
    mode = rep.slope_mode()
    curves = pipe.slope_curves
    expected = curves.G / curves.C * (1 - np.exp(-curves.C * curves.t_rev))
    gap = float(np.min(curves.m_emp - curves.m_th))
    ok = (rep.items["A5"].status == "pass" and mode == ("A5a", 1.0)
          and np.allclose(curves.m_th, expected, rtol=0, atol=1e-15)
          and curves.G > 0 and gap >= -1e-8)
    acceptance(5, ok, f"A5a G={curves.G:.3g} C={curves.C:.3g}, min(m_emp - m_th)={gap:.2e}")
    assert ok


def test_criterion_6_corruptions(configs, tmp_path, acceptance):
    codes = {}
    for name in ("heat_corrupt_halve_L", "ou_corrupt_zero_mpsi"):
        codes[name] = main(["verify", "--config", str(configs / f"{name}.yaml"),
                            "--out", str(tmp_path / name)])
    ok = all(c == 2 for c in codes.values())
    acceptance(6, ok, ", ".join(f"{k} -> exit {v}" for k, v in codes.items()))
    assert ok


def _artifacts(d):
    return sorted(p.name for p in d.iterdir() if p.suffix in (".csv", ".json", ".svg")
                  and p.name != "meta.json")


def test_criterion_7_determinism(configs, tmp_path, acceptance):
    cfg = yaml.safe_load((configs / "ou.yaml").read_text())
    cfg["mc"]["paths"] = 40000
    p = tmp_path / "ou_small.yaml"
    p.write_text(yaml.safe_dump(cfg))
    runs = {}
    for label, threads in (("t1a", 1), ("t1b", 1), ("t4a", 4), ("t4b", 4)):
        out = tmp_path / label
        for cmd in ("solve", "simulate", "bounds", "verify"):
            main([cmd, "--config", str(p), "--out", str(out), "--threads", str(threads),
                  "--no-cache"])
        runs[label] = out
    names = _artifacts(runs["t1a"])
    diffs = []
    for label in ("t1b", "t4a", "t4b"):
        if _artifacts(runs[label]) != names:
            diffs.append(f"{label}: file set")
        _, mismatch, errors = filecmp.cmpfiles(runs["t1a"], runs[label], names, shallow=False)
        diffs += [f"{label}: {m}" for m in mismatch + errors]
    ok = not diffs and len(names) > 5
    acceptance(7, ok, f"{len(names)} artifacts identical across 2 single- and 2 four-thread runs"
               if ok else f"differences: {diffs}")
    assert ok
