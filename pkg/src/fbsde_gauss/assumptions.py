"""Sampled checks of the structural assumptions on a truncated region.

Every check here is a necessary-condition test: the inequalities are tested
at the nodes of a finite product grid over ``[0, T] x [x_lo, x_hi] x
{|u| <= M} x {|p| <= M1}``. A pass means "no violation found on the samples",
never a proof over the unbounded domain.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .coeffs import CoefficientSet, evaluate

__all__ = [
    "Region", "CheckResult", "AssumptionReport",
    "check_A1", "check_growth_g", "check_A9", "check_all",
    "holder_quotient", "a9_expressions", "MODES", "REQUIRED",
]

PASS, FAIL, NOT_CHECKABLE = "pass", "fail", "not-checkable"
MODES = ("X", "Y", "Z")
REQUIRED = {
    "X": ("A1", "A2", "A3"),
    "Y": ("A1", "A2", "A3", "A4", "A5"),
    "Z": ("A1", "A2", "A3", "A4", "A5'", "A6", "A7", "A8", "A9"),
}
HOLDER_SCALES = (1e-3, 1e-2, 1e-1, 0.5)
SIGN_TOL = 1e-12
DISCLAIMER = ("All checks are sampled necessary-condition checks on a truncated box; "
              "a pass is not a proof over the unbounded domain.")


@dataclass(frozen=True)
class Region:
    x_lo: float
    x_hi: float
    M: float
    M1: float
    T: float
    counts: tuple = (5, 41, 11, 11)  # samples along t, x, u, p

    def __post_init__(self):
        if not self.x_hi > self.x_lo or not self.T > 0:
            raise ValueError("degenerate region interval")
        if self.M < 0 or self.M1 < 0:
            raise ValueError("bounds M, M1 must be non-negative")
        if len(self.counts) != 4 or min(self.counts) < 3:
            raise ValueError("need at least 3 samples per axis")

    @classmethod
    def from_solution(cls, sol, M=None, M1=None, x_lo=None, x_hi=None,
                      counts=(5, 41, 11, 11), margin=0.1):
        """Region around a solved PDE; u- and p-ranges get a ``margin`` pad."""
        g = sol.grid
        xs = g.x[sol.trusted]
        return cls(
            x_lo=float(xs[0]) if x_lo is None else float(x_lo),
            x_hi=float(xs[-1]) if x_hi is None else float(x_hi),
            M=(1.0 + margin) * sol.M if M is None else float(M),
            M1=(1.0 + margin) * sol.M1 if M1 is None else float(M1),
            T=g.T, counts=tuple(counts))

    def axes(self):
        nt, nx, nu, npp = self.counts
        return (np.linspace(0.0, self.T, nt), np.linspace(self.x_lo, self.x_hi, nx),
                np.linspace(-self.M, self.M, nu), np.linspace(-self.M1, self.M1, npp))

    def points(self, with_p=True):
        t, x, u, p = self.axes()
        if not with_p:
            p = np.array([0.0])
        mesh = np.meshgrid(t, x, u, p, indexing="ij")
        return {k: m.ravel() for k, m in zip("txup", mesh)}


@dataclass
class CheckResult:
    status: str
    values: dict = field(default_factory=dict)
    witness: dict = None
    note: str = ""

    def to_dict(self):
        d = {"status": self.status, "values": _clean(self.values)}
        if self.witness is not None:
            d["witness"] = _clean(self.witness)
        if self.note:
            d["note"] = self.note
        return d


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


@dataclass
class AssumptionReport:
    mode: str
    region: Region
    items: dict
    constants: dict
    flags: list = field(default_factory=list)

    @property
    def passed(self):
        return all(self.items[name].status != FAIL for name in REQUIRED[self.mode])

    def failures(self):
        return [n for n in REQUIRED[self.mode] if self.items[n].status == FAIL]

    def slope_mode(self):
        """Sign mode for the slope bound: (name, sign) or (None, 0)."""
        a5 = self.items.get("A5")
        if a5 is not None and a5.status == PASS:
            return ("A5a", 1.0) if a5.values.get("branch") == "a" else ("A5b", -1.0)
        a5p = self.items.get("A5'")
        if a5p is not None and a5p.status == PASS:
            return "A5'", 1.0
        return None, 0.0

    def curvature_ready(self):
        return all(n in self.items and self.items[n].status == PASS for n in ("A5'", "A8"))

    def to_dict(self):
        r = self.region
        return {
            "mode": self.mode,
            "required": list(REQUIRED[self.mode]),
            "passed": self.passed,
            "disclaimer": DISCLAIMER,
            "region": {"x": [r.x_lo, r.x_hi], "M": r.M, "M1": r.M1, "T": r.T,
                       "counts": list(r.counts)},
            "items": {k: v.to_dict() for k, v in self.items.items()},
            "constants": _clean(self.constants),
            "flags": list(self.flags),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def _witness(pts, idx):
    return {k: float(v[idx]) for k, v in pts.items()}


def _eval(cs, name, pts):
    return np.broadcast_to(evaluate(cs[name], pts), pts["x"].shape)


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------

def check_A1(cs: CoefficientSet, r: Region):
    """Sampled ``inf`` and ``sup`` of sigma; fails iff the inf is not positive.

    On failure the witness is the violating sample closest to positivity,
    i.e. where sigma vanishes or is least negative.
    """
    pts = r.points(with_p=False)
    sig = _eval(cs, "sigma", pts)
    nu, mu = float(np.min(sig)), float(np.max(sig))
    if nu > 0.0:
        return nu, mu, CheckResult(PASS, {"nu": nu, "mu": mu})
    bad = np.flatnonzero(sig <= 0.0)
    idx = bad[np.argmax(sig[bad])]
    w = _witness(pts, idx)
    w.pop("p")
    return nu, mu, CheckResult(FAIL, {"nu": nu, "mu": mu}, w, "sigma is not bounded away from 0")


def check_growth_g(cs: CoefficientSet, r: Region, trial_count=41, cap=1e6):
    """Fit ``g(t,x,u,p) u <= c1 + c2 u^2`` on the samples.

    For each trial ``c2`` on the grid ``{0} U geomspace(1e-3, cap)`` the least
    feasible ``c1`` is ``max(0, sup(g u - c2 u^2))``; the reported pair is the
    feasible one with the smallest ``c1 + c2`` (ties go to the smaller ``c2``).
    Fails if every pair exceeds ``cap``.
    """
    pts = r.points()
    gu = _eval(cs, "g", pts) * pts["u"]
    u2 = pts["u"] ** 2
    trials = np.concatenate(([0.0], np.geomspace(1e-3, cap, trial_count - 1)))
    best = None
    for c2 in trials:
        c1 = max(0.0, float(np.max(gu - c2 * u2)))
        if c1 > cap:
            continue
        if best is None or c1 + c2 < best[0] + best[1] - 1e-15:
            best = (c1, float(c2))
    if best is None:
        idx = int(np.argmax(gu))
        return np.nan, np.nan, CheckResult(FAIL, {"sup_gu": float(gu[idx])}, _witness(pts, idx),
                                           "no (c1, c2) within cap")
    return best[0], best[1], CheckResult(PASS, {"c1": best[0], "c2": best[1]})


def a9_expressions(cs: CoefficientSet):
    """The five left-hand sides of (A9) as callables on a sample dict."""
    def d(name, pts):
        return _eval(cs, name, pts)

    def psi1(P):
        return (d("f_xx", P) + 2 * d("g_xu", P) + d("g_p", P) * d("sigma_xx", P)
                + d("g_xp", P) * d("sigma_x", P))

    def psi2(P):
        sx, su = d("sigma_x", P), d("sigma_u", P)
        return (d("g_uu", P) + 2 * d("f_xu", P) + 2 * d("g_xp", P) * su + 2 * d("g_up", P) * sx
                + 2 * d("f_xp", P) * sx + 2 * d("g_p", P) * d("sigma_xu", P) + d("g_pp", P) * sx ** 2)

    def psi3(P):
        sx, su = d("sigma_x", P), d("sigma_u", P)
        return (d("f_uu", P) + 2 * d("g_up", P) * su + 2 * d("f_up", P) * sx
                + 2 * d("f_xp", P) * su + 2 * d("g_pp", P) * sx * su
                + 2 * d("f_p", P) * d("sigma_xu", P) + d("g_p", P) * d("sigma_uu", P)
                + d("f_pp", P) * sx ** 2)

    def psi4(P):
        sx, su = d("sigma_x", P), d("sigma_u", P)
        return (2 * d("f_up", P) * su + 2 * d("f_pp", P) * sx * su
                + d("f_p", P) * d("sigma_uu", P) + d("g_pp", P) * su ** 2)

    def psi5(P):
        return d("f_pp", P)

    return (psi1, psi2, psi3, psi4, psi5)


def check_A9(cs: CoefficientSet, r: Region, tol=1e-12):
    pts = r.points()
    minima = []
    witness = None
    for i, psi in enumerate(a9_expressions(cs), start=1):
        vals = psi(pts)
        idx = int(np.argmin(vals))
        minima.append(float(vals[idx]))
        if vals[idx] < -tol and witness is None:
            witness = dict(_witness(pts, idx), psi=i)
    status = PASS if witness is None else FAIL
    return minima, CheckResult(status, {f"min_psi{i}": m for i, m in enumerate(minima, 1)}, witness)


def holder_quotient(fn, pts, var, beta, scales=HOLDER_SCALES):
    """Max of ``|fn(a) - fn(a + s e_var)| / s^beta`` over samples and scales."""
    base = fn(pts)
    best = 0.0
    for s in scales:
        shifted = dict(pts)
        shifted[var] = pts[var] + s
        q = np.abs(fn(shifted) - base) / s ** beta
        best = max(best, float(np.max(q)))
    return best


def _sup_abs(cs, names, pts):
    return {n: float(np.max(np.abs(_eval(cs, n, pts)))) for n in names}


def _holder_block(cs, names, pts, beta, variables):
    out = {}
    for n in names:
        for v in variables:
            b = beta / 2 if v == "t" else beta
            out[f"{n}[{v}]"] = holder_quotient(lambda P, n=n: _eval(cs, n, P), pts, v, b)
    return out


def _finite_status(values, note):
    ok = all(np.isfinite(v) for v in values.values())
    return CheckResult(PASS if ok else FAIL, values, None, note)


def _x_samples(r):
    return np.linspace(r.x_lo, r.x_hi, max(r.counts[1], 201))


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------

def check_all(cs: CoefficientSet, r: Region, mode="X", beta=0.5, eps_strict=1e-8,
              a9_tol=1e-12, sol=None):
    """Run the checks the ``mode`` estimate depends on.

    ``mode`` is ``"X"`` ((A1)-(A3)), ``"Y"`` (adds (A4), (A5)) or ``"Z"``
    (adds (A4), (A5'), (A6)-(A9)). When ``sol`` is given the upper bound
    ``gamma`` of ``u_x sigma_x + u_x^2 sigma_u + u_xx sigma`` is computed on
    its trusted nodes.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    items, consts, flags = {}, {}, []
    pts = r.points()
    pts3 = r.points(with_p=False)
    xs = _x_samples(r)
    hx = np.broadcast_to(evaluate(cs["h_x"], {"x": xs}), xs.shape)
    hxx = np.broadcast_to(evaluate(cs["h_xx"], {"x": xs}), xs.shape)
    vars4 = ("t", "x", "u", "p")

    nu, mu, items["A1"] = check_A1(cs, r)
    consts.update(nu=nu, mu=mu)

    # (A2): (ii), (iii), (v), (vi), (vii)
    c1, c2, growth = check_growth_g(cs, r)
    consts.update(c1=c1, c2=c2)
    hvals = {"sup|h|": float(np.max(np.abs(evaluate(cs.h, {"x": xs}) + 0 * xs))),
             "sup|h'|": float(np.max(np.abs(hx))), "sup|h''|": float(np.max(np.abs(hxx))),
             "holder[h'']": holder_quotient(lambda P: np.broadcast_to(
                 evaluate(cs["h_xx"], P), P["x"].shape), {"x": xs}, "x", beta)}
    fp = np.abs(_eval(cs, "f", pts)) / (1.0 + np.abs(pts["p"]))
    gp = np.abs(_eval(cs, "g", pts)) / (1.0 + pts["p"] ** 2)
    env_v = float(max(np.max(fp), np.max(gp)))
    consts["mu_tilde"] = env_v
    holder_a = _holder_block(cs, ("sigma", "sigma_x", "sigma_u"), pts3, beta, ("t", "x", "u"))
    holder_fg = _holder_block(cs, ("f", "g"), pts, beta, vars4)
    gamma_N = float(np.max(sum(np.abs(_eval(cs, n, pts)) for n in ("f_u", "g_u", "f_p", "g_p"))))
    consts["gamma_N"] = gamma_N
    sub = {
        "ii": growth,
        "iii": _finite_status(hvals, "h and its derivatives bounded on the x-samples"),
        "v": CheckResult(NOT_CHECKABLE, {"mu_tilde": env_v},
                         note="any continuous f, g satisfy the growth envelope on a bounded box; "
                              "fitted constant reported only"),
        "vi": _finite_status({**holder_a, **holder_fg}, "sampled Holder quotients"),
        "vii": _finite_status({"gamma_N": gamma_N}, "sup of |f_u|+|g_u|+|f_p|+|g_p| on the region"),
    }
    a2_status = FAIL if any(s.status == FAIL for s in sub.values()) else PASS
    items["A2"] = CheckResult(a2_status, {k: v.to_dict() for k, v in sub.items()},
                              next((s.witness for s in sub.values() if s.witness), None))
    consts["holder"] = {**holder_a, **holder_fg}

    # (A3)
    alpha = float(np.max(sum(np.abs(_eval(cs, n, pts3))
                             for n in ("sigma", "sigma_t", "sigma_x", "sigma_u"))))
    consts["alpha"] = alpha
    a3_vals = {"alpha": alpha, **_holder_block(cs, ("sigma_x", "sigma_u"), pts3, beta, ("t", "x", "u"))}
    items["A3"] = _finite_status(a3_vals, "sigma and first partials bounded, Holder quotients sampled")
    if cs.has_abs():
        flags.append("abs/sign present: coefficients are not C^2 at the kink, derivative "
                     "table uses abs' = sign")

    gx = _eval(cs, "g_x", pts)
    consts["inf_gx"] = float(np.min(gx))
    consts["sup_gx"] = float(np.max(gx))

    if mode in ("Y", "Z"):
        names = ("f_x", "g_x", "f_u", "g_u", "f_p", "g_p")
        vals = {f"sup|{n}|": v for n, v in _sup_abs(cs, names, pts).items()}
        vals.update(_holder_block(cs, names, pts, beta, vars4))
        items["A4"] = _finite_status(vals, "first partials bounded on the region")

    if mode == "Y":
        ia = int(np.argmin(gx))
        ib = int(np.argmax(gx))
        a_ok = np.min(hx) >= -SIGN_TOL and gx[ia] >= eps_strict
        b_ok = np.max(hx) <= SIGN_TOL and gx[ib] <= -eps_strict
        vals = {"inf_gx": float(gx[ia]), "sup_gx": float(gx[ib]),
                "min_h'": float(np.min(hx)), "max_h'": float(np.max(hx)),
                "eps_strict": eps_strict}
        if a_ok or b_ok:
            vals["branch"] = "a" if a_ok else "b"
            items["A5"] = CheckResult(PASS, vals)
        else:
            w = _witness(pts, ia) if np.min(hx) >= -SIGN_TOL else {"x": float(xs[np.argmin(hx)])}
            items["A5"] = CheckResult(FAIL, vals, w, "neither branch (a) nor (b) holds strictly")

    if mode == "Z":
        ia = int(np.argmin(gx))
        ok = gx[ia] >= -SIGN_TOL and np.min(hx) >= -SIGN_TOL
        vals = {"inf_gx": float(gx[ia]), "min_h'": float(np.min(hx))}
        items["A5'"] = CheckResult(PASS if ok else FAIL, vals,
                                   None if ok else (_witness(pts, ia) if gx[ia] < -SIGN_TOL
                                                    else {"x": float(xs[np.argmin(hx)])}))
        sx, su = _eval(cs, "sigma_x", pts3), _eval(cs, "sigma_u", pts3)
        i6 = int(np.argmin(np.minimum(sx, su)))
        ok6 = min(sx[i6], su[i6]) >= -SIGN_TOL
        w6 = None if ok6 else {k: v for k, v in _witness(pts3, i6).items() if k != "p"}
        items["A6"] = CheckResult(PASS if ok6 else FAIL,
                                  {"min_sigma_x": float(np.min(sx)), "min_sigma_u": float(np.min(su))}, w6)
        names = [f"{fn}_{ab}" for fn in ("f", "g") for ab in ("xp", "up", "pp", "xx", "xu", "uu")]
        vals = {f"sup|{n}|": v for n, v in _sup_abs(cs, names, pts).items()}
        vals.update(_holder_block(cs, names, pts, beta, vars4))
        items["A7"] = _finite_status(vals, "second partials bounded on the region")
        gxx = _eval(cs, "g_xx", pts)
        i8 = int(np.argmin(gxx))
        ok8 = gxx[i8] >= eps_strict and np.min(hxx) >= -SIGN_TOL
        consts["inf_gxx"] = float(gxx[i8])
        w8 = None if ok8 else (_witness(pts, i8) if gxx[i8] < eps_strict
                               else {"x": float(xs[np.argmin(hxx)])})
        items["A8"] = CheckResult(PASS if ok8 else FAIL,
                                  {"inf_gxx": float(gxx[i8]), "min_h''": float(np.min(hxx)),
                                   "eps_strict": eps_strict}, w8)
        minima, items["A9"] = check_A9(cs, r, a9_tol)
        consts["psi_minima"] = minima

    if sol is not None:
        consts["gamma"] = gamma_bound(cs, sol)
    return AssumptionReport(mode=mode, region=r, items=items, constants=consts, flags=flags)


def gamma_bound(cs: CoefficientSet, sol):
    """Sup over trusted nodes of ``u_x sigma_x + u_x^2 sigma_u + u_xx sigma``."""
    g = sol.grid
    cols = sol.trusted
    x = g.x[cols]
    best = -np.inf
    for k, t in enumerate(g.t):
        env = {"t": float(t), "x": x, "u": sol.u[k, cols]}
        ux, uxx = sol.ux[k, cols], sol.uxx[k, cols]
        val = (ux * evaluate(cs["sigma_x"], env) + ux ** 2 * evaluate(cs["sigma_u"], env)
               + uxx * evaluate(cs.sigma, env))
        best = max(best, float(np.max(val)))
    return best
