"""Run configuration and the staged check / solve / simulate / bounds / verify pipeline.

Stages run lazily: asking for the paths solves the PDE first, asking for the
verification report simulates first. Solutions and path ensembles are cached
on disk under a hash of every config field they depend on.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import re
import warnings
from functools import cached_property
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from .assumptions import Region, check_all, gamma_bound
from .bounds import (BoundConstants, EnvelopeParams, EnvelopeRefused, x_constants,
                     y_constants, z_constants)
from .coeffs import CoefficientSet, ParseError, evaluate
from .pde import (EDGE_BAND, Grid, LowerBoundCurves, NewtonError, PdeSolution, SigmaFloorError,
                  derivative_fields, lower_bound_curves, solve_quasilinear)
from .sde import PathSet, assemble_driving, simulate_paths
from .verify import (BUDGET_HEADER, NotSolvableError, absdev_estimate, check_envelope,
                     check_malliavin_bounds, check_tails, discrepancy_appendix,
                     estimate_density, gaussian_oracle, oracle_distance, overlay_svg)

__all__ = ["ConfigError", "DEFAULTS", "SCHEMA", "load_config", "resolve_config",
           "canonical_json", "config_hash", "Pipeline", "default_cache_dir"]

COMPONENTS = ("X", "Y", "Z")

DEFAULTS = {
    "name": "",
    "coefficients": {"f": "0", "sigma": "1", "g": "0", "h": "x"},
    "x0": 0.0,
    "T": 1.0,
    "grid": {"J": 400, "K": 400, "halfwidth": "auto", "boundary": "dirichlet", "omega": 0.5},
    "region": {"M": None, "M1": None, "x_range": None},
    "check": {"beta": 0.5, "eps_strict": 1e-8},
    "mc": {"paths": 100000, "steps": 400, "seed": 0},
    "envelope": {"m": "theoretical", "rho": "theoretical", "psi_bound": "max",
                 "representation": "first-variation"},
    "bandwidth": {"rule": "silverman", "value": None},
    "verify": {"times": None, "probes": [0.5, 1.0, 2.0], "components": list(COMPONENTS),
               "z": 3.0, "violation_fraction": 0.01, "bootstrap": 200,
               "malliavin_min_fraction": 0.999},
    "bounds": {"times": None},
    "corruption": {"halve_L": False, "zero_M_psi": False},
    "output": "fbsde_out",
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_opt_pos = {"anyOf": [{"type": "null"}, _pos]}
_times = {"anyOf": [{"type": "null"},
                    {"type": "array", "items": _pos, "minItems": 1}]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SCHEMA = _obj({
    "name": {"type": "string"},
    "coefficients": _obj({k: {"type": "string", "minLength": 1} for k in ("f", "sigma", "g", "h")}),
    "x0": _num,
    "T": _pos,
    "grid": _obj({
        "J": {"type": "integer", "minimum": 8},
        "K": {"type": "integer", "minimum": 1},
        "halfwidth": {"anyOf": [{"const": "auto"}, _pos]},
        "boundary": {"enum": ["dirichlet", "linear"]},
        "omega": {"type": "number", "minimum": 0, "maximum": 1},
    }),
    "region": _obj({
        "M": _opt_pos, "M1": _opt_pos,
        "x_range": {"anyOf": [{"type": "null"},
                              {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}]},
    }),
    "check": _obj({"beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                   "eps_strict": {"type": "number", "minimum": 0}}),
    "mc": _obj({"paths": {"type": "integer", "minimum": 1000},
                "steps": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0}}),
    "envelope": _obj({
        "m": {"enum": ["theoretical", "empirical"]},
        "rho": {"enum": ["theoretical", "empirical"]},
        "psi_bound": {"enum": ["max", "paper", "lamperti"]},
        "representation": {"enum": ["first-variation", "paper-dx", "lamperti"]},
    }),
    "bandwidth": _obj({"rule": {"enum": ["silverman", "fixed"]}, "value": _opt_pos}),
    "verify": _obj({
        "times": _times,
        "probes": {"type": "array", "items": _pos, "minItems": 1},
        "components": {"type": "array", "items": {"enum": list(COMPONENTS)}, "uniqueItems": True},
        "z": _pos,
        "violation_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "bootstrap": {"type": "integer", "minimum": 2},
        "malliavin_min_fraction": {"type": "number", "minimum": 0, "maximum": 1},
    }),
    "bounds": _obj({"times": _times}),
    "corruption": _obj({"halve_L": {"type": "boolean"}, "zero_M_psi": {"type": "boolean"}}),
    "output": {"type": "string"},
}, required=("coefficients",))


class ConfigError(ValueError):
    """Invalid run configuration; ``errors`` is a list of ``(json_pointer, message)``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p or '/'}: {m}" for p, m in self.errors))


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "1e-8" as a string; accept exponent floats without a dot
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                   |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                   |\.[0-9_]+(?:[eE][-+][0-9]+)?
                   |[-+]?\.(?:inf|Inf|INF)
                   |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _pointer(path):
    return "/" + "/".join(str(p) for p in path) if path else ""


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw, seed=None):
    """Validate ``raw`` against the schema and fill every default."""
    if not isinstance(raw, dict):
        raise ConfigError([("", "config must be a mapping")])
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errs:
        raise ConfigError([(_pointer(e.absolute_path), e.message) for e in errs])
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["mc"]["seed"] = int(seed)
    T = float(cfg["T"])
    cfg["T"] = T
    cfg["x0"] = float(cfg["x0"])
    if cfg["verify"]["times"] is None:
        cfg["verify"]["times"] = [T]
    if cfg["bounds"]["times"] is None:
        cfg["bounds"]["times"] = [T / 4, T / 2, T]
    problems = []
    for key in ("verify", "bounds"):
        for i, t in enumerate(cfg[key]["times"]):
            if t > T * (1 + 1e-12):
                problems.append((f"/{key}/times/{i}", f"{t} exceeds T={T}"))
    if cfg["bandwidth"]["rule"] == "fixed" and cfg["bandwidth"]["value"] is None:
        problems.append(("/bandwidth/value", "fixed bandwidth rule needs a value"))
    xr = cfg["region"]["x_range"]
    if xr is not None and not xr[0] < xr[1]:
        problems.append(("/region/x_range", "need x_range[0] < x_range[1]"))
    for name in ("f", "sigma", "g", "h"):
        try:
            CoefficientSet.from_strings(**{name: cfg["coefficients"][name]})
        except (ParseError, ValueError) as exc:
            problems.append((f"/coefficients/{name}", str(exc)))
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path, seed=None):
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.load(fh, Loader=_Loader)  # noqa: S506 (safe loader subclass)
        except yaml.YAMLError as exc:
            raise ConfigError([("", f"YAML error: {exc}")]) from exc
    return resolve_config({} if raw is None else raw, seed=seed)


def canonical_json(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def config_hash(cfg, keys=None):
    sub = cfg if keys is None else {k: cfg[k] for k in keys}
    blob = json.dumps({"v": __version__, "cfg": sub}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def default_cache_dir():
    env = os.environ.get("FBSDE_GAUSS_CACHE")
    if env:
        return Path(env)
    return Path(os.path.expanduser("~")) / ".cache" / "fbsde_gauss"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _tkey(t):
    return f"{t:.10g}"


PDE_KEYS = ("coefficients", "T", "x0", "grid")
PATH_KEYS = PDE_KEYS + ("mc", "verify")


class Pipeline:
    """All stages for one resolved config.

    ``threads`` only changes wall time: every numerical output is identical
    for any thread count.
    """

    def __init__(self, cfg, threads=1, cache_dir=None, use_cache=True):
        self.cfg = cfg
        self.threads = max(1, int(threads))
        self.cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self.use_cache = use_cache
        self.cache_events = {}
        self.T = float(cfg["T"])
        self._reports = {}

    # -- coefficients and grid ------------------------------------------------

    @cached_property
    def cs(self):
        return CoefficientSet.from_strings(**self.cfg["coefficients"])

    @cached_property
    def halfwidth(self):
        """Grid half-width; ``auto`` uses ``|x0| + 8 mu sqrt(T) + sup|f| T``.

        ``mu`` and ``sup|f|`` are sampled before the solve on
        ``|x| <= |x0| + 8 sqrt(T)`` with ``u`` and ``p`` ranging over the sup
        of ``|h|`` and ``|h'|`` there (at least 1).
        """
        hw = self.cfg["grid"]["halfwidth"]
        if hw != "auto":
            return float(hw)
        r = self.provisional_region
        pts = r.points()
        mu = float(np.max(np.abs(np.broadcast_to(evaluate(self.cs.sigma, pts), pts["x"].shape))))
        fsup = float(np.max(np.abs(np.broadcast_to(evaluate(self.cs.f, pts), pts["x"].shape))))
        return abs(self.cfg["x0"]) + 8.0 * mu * math.sqrt(self.T) + fsup * self.T

    @cached_property
    def provisional_region(self):
        """Region known before the solve: ``|x| <= |x0| + 8 sqrt(T)`` or the grid box."""
        hw = self.cfg["grid"]["halfwidth"]
        w = abs(self.cfg["x0"]) + 8 * math.sqrt(self.T) if hw == "auto" else float(hw)
        xr = self.cfg["region"]["x_range"] or (-w, w)
        xs = np.linspace(xr[0], xr[1], 161)

        def sup(e):
            return max(1.0, float(np.max(np.abs(np.broadcast_to(evaluate(e, {"x": xs}), xs.shape)))))

        rc = self.cfg["region"]
        return Region(float(xr[0]), float(xr[1]), rc["M"] or sup(self.cs.h),
                      rc["M1"] or sup(self.cs["h_x"]), self.T)

    @cached_property
    def grid(self):
        g = self.cfg["grid"]
        hw = self.halfwidth
        return Grid(-hw, hw, int(g["J"]), self.T, int(g["K"]), g["boundary"], float(g["omega"]))

    # -- cache ----------------------------------------------------------------

    def _cache_path(self, keys, stage):
        return self.cache_dir / f"{config_hash(self.cfg, keys)}.{stage}.npz"

    def _cache_load(self, keys, stage):
        if not self.use_cache:
            return None
        p = self._cache_path(keys, stage)
        if not p.exists():
            self.cache_events[stage] = "miss"
            return None
        try:
            with np.load(p, allow_pickle=False) as z:
                data = {k: z[k] for k in z.files}
        except (OSError, ValueError):
            self.cache_events[stage] = "corrupt"
            return None
        self.cache_events[stage] = "hit"
        return data

    def _cache_store(self, keys, stage, arrays):
        if not self.use_cache:
            return
        p = self._cache_path(keys, stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(f".tmp{os.getpid()}.npz")
        np.savez(tmp, **arrays)
        os.replace(tmp, p)

    # -- PDE ------------------------------------------------------------------

    @cached_property
    def solution(self) -> PdeSolution:
        data = self._cache_load(PDE_KEYS, "pde")
        if data is not None:
            return PdeSolution(self.grid, data["theta"], data["newton_iterations"],
                               data["ux"], data["uxx"], data["ut"])
        sol = solve_quasilinear(self.cs, self.grid)
        if sol.ux is None:
            sol = derivative_fields(sol)
        self._cache_store(PDE_KEYS, "pde", {"theta": sol.theta, "newton_iterations": sol.newton_iterations,
                                            "ux": sol.ux, "uxx": sol.uxx, "ut": sol.ut})
        return sol

    @cached_property
    def solve_error(self):
        """Message of a failed solve, or ``None``."""
        try:
            self.solution
        except (SigmaFloorError, NewtonError) as exc:
            return f"{type(exc).__name__}: {exc}"
        return None

    @cached_property
    def region(self):
        """Region around the solved fields, or the provisional one if the solve failed."""
        if self.solve_error is not None:
            return self.provisional_region
        rc = self.cfg["region"]
        xr = rc["x_range"] or (None, None)
        return Region.from_solution(self.solution, M=rc["M"], M1=rc["M1"], x_lo=xr[0], x_hi=xr[1])

    def report(self, mode="X"):
        if mode not in self._reports:
            c = self.cfg["check"]
            sol = None if self.solve_error is not None else self.solution
            rep = check_all(self.cs, self.region, mode=mode, beta=c["beta"],
                            eps_strict=c["eps_strict"], sol=sol)
            if sol is None:
                rep.flags.append(f"PDE solve failed ({self.solve_error}); region taken from "
                                 "the terminal data before the solve")
            self._reports[mode] = rep
        return self._reports[mode]

    def _curves(self, mode):
        diagnostics = []
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                curves = lower_bound_curves(self.solution, self.cs, self.report(mode))
            except ValueError as exc:
                curves = self._empirical_only()
                diagnostics.append(str(exc))
        diagnostics += [str(w.message) for w in caught]
        curves.diagnostics = list(dict.fromkeys(curves.diagnostics + diagnostics))
        return curves

    def _empirical_only(self):
        """Empirical slope/curvature curves when no sign mode is certified."""
        sol = self.solution
        cols = sol.trusted
        ux = sol.ux[::-1][:, cols]
        sign = 1.0 if np.median(ux) >= 0 else -1.0
        zeros = np.zeros(self.grid.K + 1)
        return LowerBoundCurves(t_rev=self.grid.t, mode="none", sign=sign,
                                m_emp=np.min(sign * ux, axis=1), m_th=zeros, G=0.0, C=float("nan"),
                                rho_emp=np.min(sol.uxx[::-1][:, cols], axis=1), rho_th=None,
                                degenerate=True)

    @cached_property
    def slope_curves(self):
        return self._curves("Y")

    @cached_property
    def curvature_curves(self):
        return self._curves("Z")

    # -- SDE ------------------------------------------------------------------

    @cached_property
    def driving(self):
        return assemble_driving(self.cs, self.solution, nu=self.report("X").constants["nu"])

    @cached_property
    def paths(self) -> PathSet:
        mc = self.cfg["mc"]
        times = tuple(float(t) for t in self.cfg["verify"]["times"])
        data = self._cache_load(PATH_KEYS, "paths")
        if data is not None:
            return _paths_from_arrays(data)
        ps = simulate_paths(self.driving, self.cfg["x0"], mc["paths"], mc["steps"], mc["seed"],
                            record_times=times, threads=self.threads)
        self._cache_store(PATH_KEYS, "paths", _paths_to_arrays(ps))
        return ps

    # -- constants ------------------------------------------------------------

    @cached_property
    def bound_constants(self) -> BoundConstants:
        env = self.cfg["envelope"]
        rx = self.report("X").constants
        sol = self.solution
        M1 = self.cfg["region"]["M1"] or sol.M1
        M_psi = 0.0 if self.cfg["corruption"]["zero_M_psi"] else self.driving.M_psi(env["psi_bound"])
        sc, cc = self.slope_curves, self.curvature_curves
        T = self.T
        return BoundConstants(
            nu=rx["nu"], mu=rx["mu"], M=sol.M, M1=M1, M_psi=M_psi,
            gamma=gamma_bound(self.cs, sol),
            m=lambda t: sc.m(t, env["m"], T),
            rho=lambda t: cc.rho(t, env["rho"], T))

    def component_constants(self, comp, t):
        fn = {"X": x_constants, "Y": y_constants, "Z": z_constants}[comp]
        return fn(t, self.bound_constants)

    def constants_summary(self):
        sol, dc, bc = self.solution, self.driving, self.bound_constants
        sc, cc = self.slope_curves, self.curvature_curves
        return {
            "grid": {"x_lo": self.grid.x_lo, "x_hi": self.grid.x_hi, "J": self.grid.J,
                     "K": self.grid.K, "boundary": self.grid.boundary, "edge_band": EDGE_BAND},
            "newton_iterations": {"max": int(np.max(sol.newton_iterations)),
                                  "total": int(np.sum(sol.newton_iterations))},
            "M": sol.M, "M1": bc.M1, "nu": bc.nu, "mu": bc.mu, "gamma": bc.gamma,
            "M_psi": bc.M_psi, "M_psi_paper": dc.M_psi_paper, "M_psi_lamperti": dc.M_psi_lamperti,
            "psi_bound_rule": self.cfg["envelope"]["psi_bound"],
            "sup_sigma_x": dc.sup_sigma_x,
            "slope": {"mode": sc.mode, "sign": sc.sign, "G": sc.G, "C": sc.C,
                      "degenerate": sc.degenerate, "diagnostics": sc.diagnostics},
            "curvature": {"mode": cc.mode, "G2": cc.G2, "C2": cc.C2,
                          "emitted": cc.rho_th is not None, "diagnostics": cc.diagnostics},
            "assumptions": {m: self.report(m).passed for m in COMPONENTS},
        }

    def write_curves_csv(self, path):
        sc, cc = self.slope_curves, self.curvature_curves
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_rev", "t", "m_emp", "m_th", "rho_emp", "rho_th"])
            for k, tr in enumerate(sc.t_rev):
                rho_emp = "" if cc.rho_emp is None else repr(float(cc.rho_emp[k]))
                rho_th = "" if cc.rho_th is None else repr(float(cc.rho_th[k]))
                w.writerow([repr(float(tr)), repr(float(self.T - tr)), repr(float(sc.m_emp[k])),
                            repr(float(sc.m_th[k])), rho_emp, rho_th])

    def bounds_rows(self, times=None):
        """One row per component and time: ``(component, t, lower, upper, status)``."""
        times = self.cfg["bounds"]["times"] if times is None else times
        names = {"X": ("xi", "Xi"), "Y": ("lambda", "Lambda"), "Z": ("varsigma", "Sigma")}
        rows = []
        for comp in COMPONENTS:
            for t in times:
                try:
                    lo, hi = self.component_constants(comp, float(t))
                    status = "ok"
                except EnvelopeRefused as exc:
                    lo = hi = None
                    status = f"refused: {exc}"
                rows.append({"component": comp, "t": float(t), "lower_name": names[comp][0],
                             "lower": lo, "upper_name": names[comp][1], "upper": hi,
                             "status": status})
        return rows

    # -- verification ---------------------------------------------------------

    def _samples(self, comp, t):
        ps = self.paths
        store = {"X": ps.X, "Y": ps.Y, "Z": ps.Z}[comp]
        return store[t][ps.kept()]

    def _oracle(self):
        try:
            return gaussian_oracle(self.cs, self.cfg["x0"], self.T, self.T)
        except NotSolvableError:
            return None

    def verify(self, out_dir=None):
        """Full verification report as a JSON-ready dict.

        ``exit_code`` is 3 when the (A1)-(A3) checks fail, 2 when any
        density, tail or Malliavin check fails and 0 otherwise.
        """
        cfg = self.cfg
        vc = cfg["verify"]
        rep_x = self.report("X")
        report = {
            "header": {"budgets": BUDGET_HEADER, "z": vc["z"],
                       "violation_fraction": vc["violation_fraction"],
                       "malliavin_min_fraction": vc["malliavin_min_fraction"],
                       "bootstrap_resamples": vc["bootstrap"]},
            "config_hash": config_hash(cfg, [k for k in cfg if k != "output"]),
            "assumption_report_hash": {m: self.report(m).digest() for m in COMPONENTS},
            "assumptions": {m: {"passed": self.report(m).passed, "failures": self.report(m).failures()}
                            for m in COMPONENTS},
        }
        if not rep_x.passed:
            report.update(verdict="assumption-fail", exit_code=3, components={}, malliavin={})
            return report
        report["constants"] = self.constants_summary()
        ps = self.paths
        report["paths"] = {"n": ps.n_paths, "steps": ps.n_steps, "seed": ps.seed,
                           "exited": int(np.count_nonzero(ps.exited))}
        failed = False
        comps = {}
        oracle = self._oracle()
        for comp in vc["components"]:
            per_t = {}
            for t in vc["times"]:
                t = float(t)
                entry = self._verify_one(comp, t, oracle, out_dir)
                failed |= entry["status"] == "fail"
                per_t[_tkey(t)] = entry
            comps[comp] = per_t
        report["components"] = comps
        mall = self._verify_malliavin()
        failed |= any(v.get("status") == "fail" for v in mall.values())
        report["malliavin"] = mall
        analytic = None
        if oracle is not None:
            a = float(evaluate(self.cs["f_x"], {"t": 0.0, "x": 0.0, "u": 0.0, "p": 0.0}))
            s0 = float(evaluate(self.cs.sigma, {"t": 0.0, "x": 0.0, "u": 0.0}))
            analytic = lambda r, t: s0 * math.exp(a * (t - r))  # noqa: E731
        report["discrepancy"] = discrepancy_appendix(ps, analytic)
        report["corruption"] = cfg["corruption"]
        report["verdict"] = "fail" if failed else "pass"
        report["exit_code"] = 2 if failed else 0
        return report

    def _verify_one(self, comp, t, oracle, out_dir):
        vc, cfg = self.cfg["verify"], self.cfg
        x = self._samples(comp, t)
        var = float(np.var(x))
        entry = {"n": int(x.size), "mean": float(np.mean(x)), "variance": var}
        if var < 1e-12:
            entry.update(status="skipped", reason="degenerate law (sample variance below 1e-12)")
            return entry
        try:
            lo, hi = self.component_constants(comp, t)
        except EnvelopeRefused as exc:
            entry.update(status="skipped", reason=f"envelope refused: {exc}")
            return entry
        if comp == "Y" and not self.report("Y").passed:
            entry["note"] = ("slope sign assumption not certified on the region; "
                             f"envelope built from the {cfg['envelope']['m']} slope curve")
        absdev, absdev_se = absdev_estimate(x)
        ep = EnvelopeParams(entry["mean"], absdev, lo, hi)
        if cfg["corruption"]["halve_L"]:
            ep = ep.halved_L()
        bw = cfg["bandwidth"]
        de = estimate_density(x, bandwidth_rule=bw["rule"], bandwidth=bw["value"],
                              n_boot=vc["bootstrap"], seed=cfg["mc"]["seed"], threads=self.threads)
        env = check_envelope(de, ep, z=vc["z"], violation_fraction=vc["violation_fraction"],
                             absdev_se=absdev_se)
        tails = check_tails(x, entry["mean"], ep.L, vc["probes"])
        tail_fail = any(r["verdict"] == "fail" for r in tails)
        entry.update(
            l=ep.l, L=ep.L, absdev=absdev, absdev_se=absdev_se, bandwidth=de.bandwidth,
            bias_budget=de.bias_budget, kde_integral=de.integral(),
            envelope={"passed": env["passed"], "violation_measure": env["violation_measure"],
                      "window": list(de.window), "points": int(de.grid.size),
                      "failing_points": len(env["fails"]), "fails": env["fails"]},
            tails=tails,
            status="fail" if (not env["passed"] or tail_fail) else "pass")
        if oracle is not None and oracle[comp][1] > 0:
            m, v = oracle[comp]
            if abs(t - self.T) < 1e-12:
                entry["oracle"] = {"mean": m, "variance": v, **oracle_distance(de, m, v, vc["z"])}
        if out_dir is not None:
            stem = Path(out_dir) / f"overlay_{comp}_t{_tkey(t)}"
            self._write_overlay(stem, de, env, vc["z"], f"{comp} at t={_tkey(t)}")
        return entry

    @staticmethod
    def _write_overlay(stem, de, env, z, title):
        lower, upper = env["lower"], env["upper"]
        with open(f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "lower", "upper", "kde", "stderr", "ok"])
            for i in range(de.grid.size):
                w.writerow([repr(float(de.grid[i])), repr(float(lower[i])), repr(float(upper[i])),
                            repr(float(de.values[i])), repr(float(de.stderr[i])),
                            int(env["points_ok"][i])])
        overlay_svg(f"{stem}.svg", de.grid, lower, upper, de.values, de.stderr, z=z, title=title)

    def _verify_malliavin(self):
        vc, env = self.cfg["verify"], self.cfg["envelope"]
        ps, bc, dc = self.paths, self.bound_constants, self.driving
        out = {}
        for comp in vc["components"]:
            # a vanishing lower curve at some pair times still gives a valid interval
            if comp == "Y" and not any(bc.m(t) > 0 for _, t in ps.pairs):
                out[comp] = {"status": "skipped", "reason": "slope lower bound m(t) vanishes"}
                continue
            if comp == "Z":
                if np.var(ps.Z[self.T][ps.kept()]) < 1e-12:
                    out[comp] = {"status": "skipped", "reason": "degenerate law"}
                    continue
                if not any(bc.rho(t) > 0 for _, t in ps.pairs):
                    out[comp] = {"status": "skipped", "reason": "curvature lower bound rho(t) vanishes"}
                    continue
            res = check_malliavin_bounds(ps, bc, mode=comp, representation=env["representation"],
                                         sigma_x_sup=dc.sup_sigma_x,
                                         y_sign=self.slope_curves.sign if comp == "Y" else None)
            res["status"] = "pass" if res["fraction"] >= vc["malliavin_min_fraction"] else "fail"
            out[comp] = res
        return out


# -- PathSet (de)serialisation for the cache --------------------------------

def _paths_to_arrays(ps: PathSet):
    arr = {"exited": ps.exited,
           "scalars": np.array([ps.seed, ps.n_paths, ps.n_steps], dtype=np.int64),
           "floats": np.array([ps.T, ps.x0]),
           "record_times": np.array(ps.record_times, dtype=np.float64),
           "pairs": np.array(ps.pairs, dtype=np.float64).reshape(-1, 2)}
    for name, store in (("X", ps.X), ("Y", ps.Y), ("Z", ps.Z)):
        for i, t in enumerate(ps.record_times):
            if t in store:
                arr[f"{name}_{i}"] = store[t]
    for j, (r, t) in enumerate(ps.pairs):
        for rep in ("paper-dx", "first-variation", "lamperti"):
            arr[f"D_{rep}_{j}"] = ps.D[(rep, r, t)]
        if (r, t) in ps.DY:
            arr[f"DY_{j}"] = ps.DY[(r, t)]
            arr[f"DZ_{j}"] = ps.DZ[(r, t)]
    return arr


def _paths_from_arrays(a):
    seed, n_paths, n_steps = (int(v) for v in a["scalars"])
    T, x0 = (float(v) for v in a["floats"])
    rec = tuple(float(t) for t in a["record_times"])
    pairs = tuple((float(r), float(t)) for r, t in a["pairs"])
    stores = {}
    for name in ("X", "Y", "Z"):
        stores[name] = {t: a[f"{name}_{i}"] for i, t in enumerate(rec) if f"{name}_{i}" in a}
    D, DY, DZ = {}, {}, {}
    for j, (r, t) in enumerate(pairs):
        for rep in ("paper-dx", "first-variation", "lamperti"):
            D[(rep, r, t)] = a[f"D_{rep}_{j}"]
        if f"DY_{j}" in a:
            DY[(r, t)] = a[f"DY_{j}"]
            DZ[(r, t)] = a[f"DZ_{j}"]
    return PathSet(seed=seed, n_paths=n_paths, n_steps=n_steps, T=T, x0=x0, record_times=rec,
                   X=stores["X"], Y=stores["Y"], Z=stores["Z"], exited=a["exited"],
                   D=D, DY=DY, DZ=DZ, pairs=pairs)

