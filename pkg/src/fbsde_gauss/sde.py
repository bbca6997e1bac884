"""Euler-Maruyama paths of the decoupled forward SDE and their Malliavin derivatives.

The forward coefficients are ``f~(t,x) = f(t,x,u,u_x sigma)`` and
``sigma~(t,x) = sigma(t,x,u)`` with ``u`` read off a solved PDE, or they are
injected directly as expressions in ``(t, x)``.

Three pathwise representations of ``D_r X_t`` are computed side by side:

``paper-dx``
    ``sigma~(t,X_t) exp(int_r^t psi ds)`` with ``psi`` transcribed as printed;
``first-variation``
    ``sigma~(r,X_r) exp(int_r^t (f~_x - sigma~_x^2/2) ds + int_r^t sigma~_x dB)``,
    the default for all downstream bounds;
``lamperti``
    the same exponential form as ``paper-dx`` with the drift of the
    Lamperti-transformed equation, ``f~_x - f~ sigma~_x/sigma~ - sigma~_t/sigma~
    - sigma~ sigma~_xx/2``. It equals ``first-variation`` pathwise by Ito's
    formula, which makes it the arbiter between the other two.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import counter_normals
from .coeffs import diff, evaluate, parse_expr
from .pde import EDGE_BAND, EPS_GRID

__all__ = [
    "DrivingCoefficients", "PathSet", "REPRESENTATIONS",
    "assemble_driving", "simulate_paths", "malliavin_X", "malliavin_YZ",
    "default_pairs", "NonFiniteStateError",
]

REPRESENTATIONS = ("paper-dx", "first-variation", "lamperti")
CHUNK = 16384


class NonFiniteStateError(FloatingPointError):
    def __init__(self, path, step):
        super().__init__(f"non-finite state on path {path} at step {step}")
        self.path = path
        self.step = step


def _bcast(v, shape):
    return np.broadcast_to(np.asarray(v, dtype=np.float64), shape)


class DrivingCoefficients:
    """Evaluators of ``f~``, ``sigma~``, their derivatives and ``psi``.

    Use :func:`assemble_driving` for the coupled case or
    :meth:`from_exprs` to inject ``f~`` and ``sigma~`` directly.
    """

    def __init__(self, T, x_lo, x_hi, window, cs=None, sol=None, exprs=None,
                 sigma_floor=True):
        self.T = float(T)
        self.x_lo, self.x_hi = float(x_lo), float(x_hi)
        self.window = (float(window[0]), float(window[1]))
        self.cs = cs
        self.sol = sol
        self.exprs = exprs
        self.sigma_floor = sigma_floor
        self.M_psi_paper = None
        self.M_psi_lamperti = None
        self.sup_sigma_x = None

    @classmethod
    def from_exprs(cls, f_tilde, sigma_tilde, T, x_lo=-50.0, x_hi=50.0, sigma_floor=True):
        """Decoupled SDE with ``f~`` and ``sigma~`` given as strings in ``(t, x)``."""
        f = parse_expr(f_tilde, ("t", "x"))
        s = parse_expr(sigma_tilde, ("t", "x"))
        exprs = {"f": f, "s": s, "f_x": diff(f, "x"), "s_x": diff(s, "x"),
                 "s_xx": diff(diff(s, "x"), "x"), "s_t": diff(s, "t")}
        dc = cls(T, x_lo, x_hi, (x_lo, x_hi), exprs=exprs, sigma_floor=sigma_floor)
        dc._sample_bounds()
        return dc

    @property
    def coupled(self):
        return self.sol is not None

    def evaluate(self, t, x):
        """All coefficient fields at time ``t`` (scalar) and points ``x``."""
        x = np.asarray(x, dtype=np.float64)
        shape = x.shape
        if self.exprs is not None:
            env = {"t": float(t), "x": x}
            out = {k: _bcast(evaluate(e, env), shape) for k, e in self.exprs.items()}
            out["u"] = out["ux"] = out["uxx"] = None
        else:
            cs = self.cs
            u, ux, uxx, ut = self.sol.interp(t, x, ("u", "ux", "uxx", "ut"))
            env3 = {"t": float(t), "x": x, "u": u}

            def ev(name, env=env3):
                return _bcast(evaluate(cs[name], env), shape)

            s = ev("sigma")
            sx, su = ev("sigma_x"), ev("sigma_u")
            p = ux * s
            env4 = {"t": float(t), "x": x, "u": u, "p": p}
            s_x = sx + su * ux
            s_xx = ev("sigma_xx") + 2.0 * ev("sigma_xu") * ux + ev("sigma_uu") * ux ** 2 + su * uxx
            px = uxx * s + ux * s_x
            f_x = ev("f_x", env4) + ev("f_u", env4) * ux + ev("f_p", env4) * px
            out = {"f": ev("f", env4), "s": s, "f_x": f_x, "s_x": s_x, "s_xx": s_xx,
                   "s_t": ev("sigma_t") + su * ut, "u": u, "ux": ux, "uxx": uxx}
        if self.sigma_floor and np.any(out["s"] <= 0.0):
            raise ValueError(f"sigma~ not positive at t={t}")
        f, s, fx, sx, sxx, st = (out[k] for k in ("f", "s", "f_x", "s_x", "s_xx", "s_t"))
        with np.errstate(divide="ignore", invalid="ignore"):
            out["psi"] = 2.0 * f * sx / s ** 2 - (fx + f * sxx + st) / s - 0.5 * sxx * s
            out["psi_lamperti"] = fx - f * sx / s - st / s - 0.5 * s * sxx
        return out

    def _sample_bounds(self, n_t=21, n_x=201):
        lo, hi = self.window
        xs = np.linspace(lo, hi, n_x)
        mp = ml = sx = 0.0
        smin = np.inf
        for t in np.linspace(0.0, self.T, n_t):
            v = self.evaluate(t, xs)
            mp = max(mp, float(np.max(np.abs(v["psi"]))))
            ml = max(ml, float(np.max(np.abs(v["psi_lamperti"]))))
            sx = max(sx, float(np.max(np.abs(v["s_x"]))))
            smin = min(smin, float(np.min(v["s"])))
        self.M_psi_paper, self.M_psi_lamperti, self.sup_sigma_x = mp, ml, sx
        self.min_sigma = smin

    def M_psi(self, rule="max"):
        """Bound on ``|psi|``: ``paper``, ``lamperti`` or the ``max`` of both."""
        if rule == "paper":
            return self.M_psi_paper
        if rule == "lamperti":
            return self.M_psi_lamperti
        if rule == "max":
            return max(self.M_psi_paper, self.M_psi_lamperti)
        raise ValueError(f"unknown psi bound rule {rule!r}")


def assemble_driving(cs, sol, nu=None):
    """Forward coefficients read off ``sol`` plus sampled ``M_psi`` bounds.

    The measurement window is the PDE grid minus the low-confidence edge band.
    If ``nu`` is given, ``sigma~ >= nu - EPS_GRID`` is enforced on the window.
    """
    g = sol.grid
    xs = g.x
    window = (float(xs[EDGE_BAND]), float(xs[-1 - EDGE_BAND]))
    dc = DrivingCoefficients(g.T, g.x_lo, g.x_hi, window, cs=cs, sol=sol)
    dc._sample_bounds()
    if nu is not None and dc.min_sigma < nu - EPS_GRID:
        raise ValueError(f"sigma~ drops to {dc.min_sigma:.6g} below nu(M)={nu:.6g}")
    return dc


def default_pairs(T):
    rs = (0.0, T / 4, T / 2)
    ts = (T / 2, 3 * T / 4, T)
    return tuple((r, t) for r in rs for t in ts if r <= t)


@dataclass
class PathSet:
    seed: int
    n_paths: int
    n_steps: int
    T: float
    x0: float
    record_times: tuple
    X: dict                      # t -> samples
    Y: dict
    Z: dict
    exited: np.ndarray           # ever left the measurement window
    D: dict                      # (rep, r, t) -> D_r X_t samples
    DY: dict                     # (r, t) -> first-variation based D_r Y_t
    DZ: dict
    pairs: tuple
    trajectories: np.ndarray = None
    increments: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def dt(self):
        return self.T / self.n_steps

    def kept(self):
        return ~self.exited

    def summary_rows(self):
        """(component, t, n, mean, std, absdev, q01, q50, q99) over kept paths."""
        rows = []
        keep = self.kept()
        for comp, store in (("X", self.X), ("Y", self.Y), ("Z", self.Z)):
            for t in self.record_times:
                v = store.get(t)
                if v is None:
                    continue
                v = v[keep]
                m = float(np.mean(v))
                q = np.quantile(v, [0.01, 0.5, 0.99])
                rows.append((comp, t, int(v.size), m, float(np.std(v)),
                             float(np.mean(np.abs(v - m))), *map(float, q)))
        return rows

    def to_csv(self, summary_path, terminal_path=None):
        with open(summary_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["component", "t", "n", "mean", "std", "absdev", "q01", "q50", "q99"])
            for row in self.summary_rows():
                w.writerow([row[0]] + [repr(v) if isinstance(v, float) else v for v in row[1:]])
        if terminal_path is not None:
            T = self.record_times[-1]
            with open(terminal_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["path", "exited", "X", "Y", "Z"])
                Y = self.Y.get(T)
                Z = self.Z.get(T)
                for i in range(self.n_paths):
                    w.writerow([i, int(self.exited[i]), repr(float(self.X[T][i])),
                                "" if Y is None else repr(float(Y[i])),
                                "" if Z is None else repr(float(Z[i]))])


def _lattice(t, dt, n_steps):
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 * max(1.0, t) or not 0 <= k <= n_steps:
        raise ValueError(f"time {t} is not on the step lattice (dt={dt})")
    return k


def _simulate_chunk(dc, x0, ids, n_steps, seed, rec_steps, pairs_k, store_paths):
    n = ids.shape[0]
    T = dc.T
    dt = T / n_steps
    sq = np.sqrt(dt)
    lo, hi = dc.window
    X = np.full(n, float(x0))
    exited = (X < lo) | (X > hi)
    r_steps = sorted({kr for kr, _ in pairs_k})
    by_t = {}
    for kr, kt in pairs_k:
        by_t.setdefault(kt, []).append(kr)
    Ipsi = {kr: np.zeros(n) for kr in r_steps}
    Ilam = {kr: np.zeros(n) for kr in r_steps}
    Efv = {kr: np.zeros(n) for kr in r_steps}
    s_at_r = {}
    out_X, out_Y, out_Z, D, DY, DZ = {}, {}, {}, {}, {}, {}
    traj = np.empty((n_steps + 1, n)) if store_paths else None
    incr = np.empty((n_steps, n)) if store_paths else None
    prev = None
    for k in range(n_steps + 1):
        t = k * dt
        v = dc.evaluate(t, X)
        if prev is not None:
            for kr in r_steps:
                if kr < k:
                    Ipsi[kr] += 0.5 * (prev["psi"] + v["psi"]) * dt
                    Ilam[kr] += 0.5 * (prev["psi_lamperti"] + v["psi_lamperti"]) * dt
        if k in rec_steps:
            out_X[k] = X.copy()
            if dc.coupled:
                out_Y[k] = v["u"].copy()
                out_Z[k] = v["ux"] * v["s"]
        for kr in r_steps:
            if kr == k:
                s_at_r[kr] = v["s"].copy()
        for kr in by_t.get(k, ()):
            dpap = v["s"] * np.exp(Ipsi[kr])
            dlam = v["s"] * np.exp(Ilam[kr])
            dfv = s_at_r[kr] * np.exp(Efv[kr])
            D[("paper-dx", kr, k)] = dpap
            D[("lamperti", kr, k)] = dlam
            D[("first-variation", kr, k)] = dfv
            if dc.coupled:
                DY[(kr, k)] = v["ux"] * dfv
                DZ[(kr, k)] = (v["ux"] * v["s_x"] + v["uxx"] * v["s"]) * dfv
        if store_paths:
            traj[k] = X
        if k == n_steps:
            break
        dB = sq * counter_normals(seed, ids, k)
        if store_paths:
            incr[k] = dB
        for kr in r_steps:
            if kr <= k:
                Efv[kr] += (v["f_x"] - 0.5 * v["s_x"] ** 2) * dt + v["s_x"] * dB
        X = X + v["f"] * dt + v["s"] * dB
        bad = ~np.isfinite(X)
        if np.any(bad):
            raise NonFiniteStateError(int(ids[np.argmax(bad)]), k + 1)
        exited |= (X < lo) | (X > hi)
        prev = v
    return out_X, out_Y, out_Z, D, DY, DZ, exited, traj, incr


def simulate_paths(dc: DrivingCoefficients, x0, n_paths, n_steps, seed, pairs=None,
                   record_times=None, threads=1, store_paths=False, path_ids=None):
    """Euler-Maruyama ensemble with counter-based increments.

    Brownian increments are keyed by ``(seed, path id, step)``, so results do
    not depend on ``threads`` or on how paths are chunked, and
    ``path_ids=[i]`` replays path ``i`` of the full ensemble exactly.
    Paths that leave the measurement window are flagged in ``exited``.
    """
    T = dc.T
    dt = T / n_steps
    if not dc.window[0] <= x0 <= dc.window[1]:
        raise ValueError("x0 outside the measurement window")
    pairs = default_pairs(T) if pairs is None else tuple(pairs)
    pairs = tuple((float(r), float(t)) for r, t in pairs if r <= t)
    pairs_k = tuple((_lattice(r, dt, n_steps), _lattice(t, dt, n_steps)) for r, t in pairs)
    rec = sorted({T} | {t for _, t in pairs} | set(record_times or ()))
    rec_k = {_lattice(t, dt, n_steps): t for t in rec}
    ids_all = (np.arange(n_paths, dtype=np.int64) if path_ids is None
               else np.asarray(path_ids, dtype=np.int64))
    chunks = [ids_all[i:i + CHUNK] for i in range(0, ids_all.shape[0], CHUNK)]
    job = lambda ids: _simulate_chunk(dc, x0, ids, n_steps, seed, set(rec_k),  # noqa: E731
                                      pairs_k, store_paths)
    if threads and threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]

    def cat(i, key_map):
        keys = parts[0][i].keys()
        return {key_map(k): np.concatenate([p[i][k] for p in parts]) for k in keys}

    to_t = lambda k: rec_k[k]  # noqa: E731
    X = cat(0, to_t)
    Y = cat(1, to_t)
    Z = cat(2, to_t)
    D = cat(3, lambda key: (key[0], key[1] * dt, key[2] * dt))
    D = {(rep, _snap(r, pairs), _snap(t, pairs)): v for (rep, r, t), v in D.items()}
    DY = {(_snap(r * dt, pairs), _snap(t * dt, pairs)): v for (r, t), v in cat(4, lambda k: k).items()}
    DZ = {(_snap(r * dt, pairs), _snap(t * dt, pairs)): v for (r, t), v in cat(5, lambda k: k).items()}
    exited = np.concatenate([p[6] for p in parts])
    traj = np.concatenate([p[7] for p in parts], axis=1) if store_paths else None
    incr = np.concatenate([p[8] for p in parts], axis=1) if store_paths else None
    return PathSet(seed=int(seed), n_paths=int(ids_all.shape[0]), n_steps=int(n_steps), T=T,
                   x0=float(x0), record_times=tuple(rec), X=X, Y=Y, Z=Z, exited=exited,
                   D=D, DY=DY, DZ=DZ, pairs=pairs, trajectories=traj, increments=incr)


def _snap(v, pairs):
    """Map a lattice time back to the exact float used in ``pairs``."""
    for r, t in pairs:
        for c in (r, t):
            if abs(c - v) <= 1e-9 * max(1.0, abs(c)):
                return c
    return v


def malliavin_X(path, increments, dc, r, t, representation="first-variation"):
    """``D_r X_t`` along one stored trajectory.

    ``path`` holds ``X`` at every step (length ``n_steps + 1``) and
    ``increments`` the Brownian increments that produced it. Returns 0 when
    ``r > t``.
    """
    if r > t:
        return 0.0
    path = np.asarray(path, dtype=np.float64)
    n_steps = path.shape[0] - 1
    dt = dc.T / n_steps
    kr, kt = _lattice(r, dt, n_steps), _lattice(t, dt, n_steps)
    vals = [dc.evaluate(k * dt, path[k:k + 1]) for k in range(kr, kt + 1)]
    if representation == "first-variation":
        e = 0.0
        for i, k in enumerate(range(kr, kt)):
            v = vals[i]
            e += float((v["f_x"] - 0.5 * v["s_x"] ** 2)[0] * dt + v["s_x"][0] * increments[k])
        return float(vals[0]["s"][0] * np.exp(e))
    key = {"paper-dx": "psi", "lamperti": "psi_lamperti"}[representation]
    psi = np.array([v[key][0] for v in vals])
    integral = float(np.sum(0.5 * (psi[1:] + psi[:-1]) * dt)) if psi.size > 1 else 0.0
    return float(vals[-1]["s"][0] * np.exp(integral))


def malliavin_YZ(x_t, d_x, dc, t):
    """``(D_r Y_t, D_r Z_t)`` from ``X_t`` and ``D_r X_t`` by the chain rule."""
    v = dc.evaluate(t, np.atleast_1d(x_t))
    dy = v["ux"] * d_x
    dz = (v["ux"] * v["s_x"] + v["uxx"] * v["s"]) * d_x
    if np.ndim(x_t) == 0:
        return float(dy[0]), float(dz[0])
    return dy, dz
