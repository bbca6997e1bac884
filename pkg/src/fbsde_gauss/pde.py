"""Finite-difference solution of the time-reversed quasilinear Cauchy problem.

Time runs on the reversed clock ``t_rev = T - t``: ``theta(t_rev, x) = u(T - t_rev, x)``
solves

    theta_t = 1/2 sigma^2 theta_xx + f(., p) theta_x + g(., p),  p = sigma theta_x,
    theta(0, x) = h(x),

with every coefficient evaluated at physical time ``T - t_rev``. Each step is a
theta-scheme (Crank-Nicolson by default) whose nonlinear stage equation is
solved by damped Newton on the tridiagonal Jacobian.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._kernels import cubic_interp, thomas_solve
from .coeffs import CoefficientSet, Var, add, diff, evaluate, mul, num, substitute

__all__ = [
    "Grid", "PdeSolution", "LowerBoundCurves",
    "NewtonError", "SigmaFloorError",
    "solve_quasilinear", "derivative_fields", "solve_linear_derivative_pde",
    "lower_bound_curves", "derivative_pde_exprs", "curvature_pde_exprs",
    "EDGE_BAND", "SIGMA2_FLOOR", "EPS_GRID",
]

EDGE_BAND = 3
SIGMA2_FLOOR = 1e-12
EPS_GRID = 1e-8


class NewtonError(RuntimeError):
    def __init__(self, step, residual, iterations):
        super().__init__(f"Newton did not converge at step {step} "
                         f"after {iterations} iterations (residual {residual:.3e})")
        self.step = step
        self.residual = residual


class SigmaFloorError(RuntimeError):
    def __init__(self, t, x, value):
        super().__init__(f"sigma^2 = {value:.3e} below floor {SIGMA2_FLOOR} at t={t:.6g}, x={x:.6g}")
        self.t = t
        self.x = x
        self.value = value


@dataclass(frozen=True)
class Grid:
    x_lo: float
    x_hi: float
    J: int
    T: float
    K: int
    boundary: str = "dirichlet"  # or "linear": second-derivative-zero extrapolation
    omega: float = 0.5

    def __post_init__(self):
        if not self.x_hi > self.x_lo:
            raise ValueError("empty x interval")
        if self.J < 8:
            raise ValueError("J must be at least 8")
        if self.K < 1 or not self.T > 0:
            raise ValueError("need K >= 1 and T > 0")
        if self.boundary not in ("dirichlet", "linear"):
            raise ValueError(f"unknown boundary kind {self.boundary!r}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")

    @property
    def dx(self):
        return (self.x_hi - self.x_lo) / self.J

    @property
    def dt(self):
        return self.T / self.K

    @property
    def x(self):
        return self.x_lo + self.dx * np.arange(self.J + 1)

    @property
    def t(self):
        return self.dt * np.arange(self.K + 1)

    @property
    def mesh_ratio(self):
        return self.dt / self.dx ** 2

    def refined(self, factor=2):
        return Grid(self.x_lo, self.x_hi, self.J * factor, self.T, self.K * factor,
                    self.boundary, self.omega)


@dataclass
class PdeSolution:
    """Nodal fields on ``grid``; row ``k`` of ``u`` is physical time ``k*dt``."""

    grid: Grid
    theta: np.ndarray
    newton_iterations: np.ndarray
    ux: np.ndarray = None
    uxx: np.ndarray = None
    ut: np.ndarray = None

    @property
    def u(self):
        return self.theta[::-1]

    @property
    def trusted(self):
        """Column mask excluding the low-confidence edge band."""
        mask = np.zeros(self.grid.J + 1, dtype=bool)
        mask[EDGE_BAND:self.grid.J + 1 - EDGE_BAND] = True
        return mask

    @property
    def M(self):
        return float(np.max(np.abs(self.theta)))

    @property
    def M1(self):
        if self.ux is None:
            raise ValueError("derivative fields not computed")
        return float(np.max(np.abs(self.ux[:, self.trusted])))

    def field(self, name):
        return {"u": self.u, "ux": self.ux, "uxx": self.uxx, "ut": self.ut}[name]

    def interp(self, t, x, names=("u", "ux", "uxx")):
        """Cubic-in-x, linear-in-t interpolation at physical time ``t``.

        Returns an array of shape ``(len(names), len(x))``.
        """
        g = self.grid
        s = min(max(float(t) / g.dt, 0.0), float(g.K))
        k = min(int(np.floor(s)), g.K - 1)
        w = s - k
        stack = np.stack([self.field(n)[k] for n in names])
        if w > 0.0:
            stack = (1.0 - w) * stack + w * np.stack([self.field(n)[k + 1] for n in names])
        return cubic_interp(g.x_lo, g.dx, stack, np.atleast_1d(x))

    def to_csv(self, path):
        g = self.grid
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "u", "ux", "uxx"])
            xs = g.x
            for k, t in enumerate(g.t):
                for j in range(g.J + 1):
                    w.writerow([repr(float(t)), repr(float(xs[j])), repr(float(self.u[k, j])),
                                repr(float(self.ux[k, j])), repr(float(self.uxx[k, j]))])


# ---------------------------------------------------------------------------
# quasilinear solve
# ---------------------------------------------------------------------------

def _operator(cs, s, x, th, dx, want_jac):
    """Spatial operator F(theta) on interior nodes and its tridiagonal Jacobian."""
    tx = (th[2:] - th[:-2]) / (2.0 * dx)
    txx = (th[2:] - 2.0 * th[1:-1] + th[:-2]) / dx ** 2
    xi, ui = x[1:-1], th[1:-1]
    env3 = {"t": s, "x": xi, "u": ui}
    sig = evaluate(cs.sigma, env3)
    s2 = sig * sig
    if np.any(s2 < SIGMA2_FLOOR):
        j = int(np.argmin(s2))
        raise SigmaFloorError(s, float(xi[j]), float(s2[j]))
    p = sig * tx
    env = {"t": s, "x": xi, "u": ui, "p": p}
    B = evaluate(cs.f, env)
    G = evaluate(cs.g, env)
    A = 0.5 * s2
    F = A * txx + B * tx + G
    if not want_jac:
        return F, None
    sig_u = evaluate(cs["sigma_u"], env3)
    f_u, f_p = evaluate(cs["f_u"], env), evaluate(cs["f_p"], env)
    g_u, g_p = evaluate(cs["g_u"], env), evaluate(cs["g_p"], env)
    # dF/dtheta_j through the u-slot (sigma, f, g) and p = sigma(u) * theta_x
    dp_du = sig_u * tx
    d_mid = sig * sig_u * txx + (f_u + f_p * dp_du) * tx + g_u + g_p * dp_du - 2.0 * A / dx ** 2
    # dF/dtheta_{j+-1} through theta_x, theta_xx and p
    adv = (B + tx * f_p * sig + g_p * sig) / (2.0 * dx)
    d_lo = A / dx ** 2 - adv
    d_up = A / dx ** 2 + adv
    return F, (d_lo, d_mid, d_up)


def _apply_bc(th, h_edges, boundary):
    if boundary == "dirichlet":
        th[0], th[-1] = h_edges
    else:
        th[0] = 2.0 * th[1] - th[2]
        th[-1] = 2.0 * th[-2] - th[-3]


def _solve_interior(lower, diag, upper, rhs, boundary):
    """Solve for interior updates; boundary updates follow from the BC."""
    lower, diag, upper = lower.copy(), diag.copy(), upper.copy()
    if boundary == "linear":
        # delta_0 = 2 delta_1 - delta_2 folded into row 1, mirrored at the right
        diag[0] += 2.0 * lower[0]
        upper[0] -= lower[0]
        diag[-1] += 2.0 * upper[-1]
        lower[-1] -= upper[-1]
    d = thomas_solve(lower, diag, upper, rhs)
    n = d.shape[0] + 2
    out = np.zeros(n)
    out[1:-1] = d
    if boundary == "linear":
        out[0] = 2.0 * d[0] - d[1]
        out[-1] = 2.0 * d[-1] - d[-2]
    return out


def solve_quasilinear(cs: CoefficientSet, grid: Grid, newton_tol=1e-10, max_newton=25,
                      with_derivatives=True):
    """March the reversed-time problem from ``h`` over ``grid``.

    Newton stops when the sup-norm of the update is at most
    ``newton_tol * max(1, |theta|_inf)``; more than ``max_newton`` iterations
    raise :class:`NewtonError`.
    """
    x = grid.x
    dx, dt, om = grid.dx, grid.dt, grid.omega
    T = grid.T
    theta = np.empty((grid.K + 1, grid.J + 1))
    h0 = evaluate(cs.h, {"x": x})
    theta[0] = h0
    h_edges = (h0[0], h0[-1])
    sig0 = evaluate(cs.sigma, {"t": T, "x": x, "u": h0})
    if np.any(sig0 * sig0 < SIGMA2_FLOOR):
        j = int(np.argmin(sig0 * sig0))
        raise SigmaFloorError(T, float(x[j]), float(sig0[j] ** 2))
    iters = np.zeros(grid.K, dtype=np.int64)

    F_old, _ = _operator(cs, T, x, theta[0], dx, want_jac=False)
    for n in range(grid.K):
        s_new = T - (n + 1) * dt
        th_old = theta[n]
        th = th_old.copy()
        _apply_bc(th, h_edges, grid.boundary)
        explicit = th_old[1:-1] + dt * (1.0 - om) * F_old

        F, jac = _operator(cs, s_new, x, th, dx, want_jac=True)
        R = th[1:-1] - explicit - dt * om * F
        res = np.max(np.abs(R))
        converged = False
        for it in range(1, max_newton + 1):
            d_lo, d_mid, d_up = jac
            delta = _solve_interior(-dt * om * d_lo, 1.0 - dt * om * d_mid,
                                    -dt * om * d_up, -R, grid.boundary)
            lam = 1.0
            while True:
                trial = th + lam * delta
                F_t, jac_t = _operator(cs, s_new, x, trial, dx, want_jac=True)
                R_t = trial[1:-1] - explicit - dt * om * F_t
                res_t = np.max(np.abs(R_t))
                if res_t <= res or lam <= 1.0 / 16 or res_t < 1e-14:
                    break
                lam *= 0.5
            th, F, jac, R, res = trial, F_t, jac_t, R_t, res_t
            step = lam * np.max(np.abs(delta))
            if step <= newton_tol * max(1.0, np.max(np.abs(th))):
                converged = True
                break
        iters[n] = it
        if not converged:
            raise NewtonError(n + 1, float(res), it)
        theta[n + 1] = th
        F_old = F

    sol = PdeSolution(grid=grid, theta=theta, newton_iterations=iters)
    if with_derivatives:
        derivative_fields(sol)
    return sol


def _d1(row, dx):
    out = np.empty_like(row)
    out[2:-2] = (-row[4:] + 8.0 * row[3:-1] - 8.0 * row[1:-3] + row[:-4]) / (12.0 * dx)
    out[1] = (row[2] - row[0]) / (2.0 * dx)
    out[-2] = (row[-1] - row[-3]) / (2.0 * dx)
    out[0] = (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * dx)
    out[-1] = (3.0 * row[-1] - 4.0 * row[-2] + row[-3]) / (2.0 * dx)
    return out


def _d2(row, dx):
    out = np.empty_like(row)
    out[2:-2] = (-row[4:] + 16.0 * row[3:-1] - 30.0 * row[2:-2]
                 + 16.0 * row[1:-3] - row[:-4]) / (12.0 * dx ** 2)
    out[1] = (row[2] - 2.0 * row[1] + row[0]) / dx ** 2
    out[-2] = (row[-1] - 2.0 * row[-2] + row[-3]) / dx ** 2
    out[0] = (2.0 * row[0] - 5.0 * row[1] + 4.0 * row[2] - row[3]) / dx ** 2
    out[-1] = (2.0 * row[-1] - 5.0 * row[-2] + 4.0 * row[-3] - row[-4]) / dx ** 2
    return out


def derivative_fields(sol: PdeSolution):
    """Fill ``ux``, ``uxx`` (and ``ut``) on ``sol`` in place and return it.

    Fourth-order central differences inside, second-order one-sided stencils
    on the two outermost columns per side.
    """
    g = sol.grid
    u = sol.u
    sol.ux = np.array([_d1(row, g.dx) for row in u])
    sol.uxx = np.array([_d2(row, g.dx) for row in u])
    ut = np.empty_like(u)
    if g.K >= 2:
        ut[1:-1] = (u[2:] - u[:-2]) / (2.0 * g.dt)
        ut[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * g.dt)
        ut[-1] = (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * g.dt)
    else:
        ut[:] = (u[1] - u[0]) / g.dt
    sol.ut = ut
    return sol


# ---------------------------------------------------------------------------
# differentiated equations
# ---------------------------------------------------------------------------

_V, _W = Var("v"), Var("w")


def derivative_pde_exprs(cs: CoefficientSet):
    """Coefficients of the equation satisfied by ``v = d_x theta``.

    Returns expressions ``a, b, c, q`` in ``(t, x, u, v)`` (``u`` is the
    solution value, ``v`` its slope, ``p`` replaced by ``sigma*v``) such that
    ``v_t = a v_xx + b v_x + c v + q``. ``d_x a`` inside ``b`` is the total
    x-derivative ``sigma * d_x sigma~``.
    """
    sig = cs.sigma
    pmap = {"p": mul(sig, _V)}
    sub = lambda name: substitute(cs[name], pmap)  # noqa: E731
    f, f_x, f_u, f_p = sub("f"), sub("f_x"), sub("f_u"), sub("f_p")
    g_u, g_p, g_x = sub("g_u"), sub("g_p"), sub("g_x")
    dsig = add(cs["sigma_x"], mul(cs["sigma_u"], _V))
    a = mul(num(0.5), mul(sig, sig))
    b = add(add(add(mul(sig, dsig), mul(mul(f_p, sig), _V)), mul(g_p, sig)), f)
    c = add(add(add(add(f_x, g_u), mul(g_p, dsig)), mul(f_u, _V)), mul(mul(f_p, dsig), _V))
    return {"a": a, "b": b, "c": c, "q": g_x}


def curvature_pde_exprs(cs: CoefficientSet):
    """Zeroth-order coefficient and forcing of the equation for ``w = d_xx theta``.

    Differentiating ``v_t = a v_xx + b v_x + c v + q`` once more in x with the
    total derivative ``D = d_x + v d_u + w d_v`` gives

        w_t = a w_xx + (D a + b) w_x + P w + S,
        P = d_x b + v d_u b + w d_v b + c + v d_v c + d_v q,
        S = v (d_x c + v d_u c) + d_x q + v d_u q.

    ``P`` is the grouping used for the curvature lower bound; it is evaluated
    along the solved fields, so its dependence on ``w`` is harmless.
    """
    e = derivative_pde_exprs(cs)
    b, c, q = e["b"], e["c"], e["q"]
    P = add(add(add(add(add(diff(b, "x"), mul(_V, diff(b, "u"))), mul(_W, diff(b, "v"))), c),
                mul(_V, diff(c, "v"))), diff(q, "v"))
    S = add(add(mul(_V, add(diff(c, "x"), mul(_V, diff(c, "u")))), diff(q, "x")),
            mul(_V, diff(q, "u")))
    return {"P": P, "S": S}


def _fields_env(sol, k, cols=slice(None)):
    g = sol.grid
    return {"t": float(g.t[k]), "x": g.x[cols], "u": sol.u[k, cols],
            "v": sol.ux[k, cols], "w": sol.uxx[k, cols]}


def solve_linear_derivative_pde(cs: CoefficientSet, grid: Grid, sol: PdeSolution):
    """Solve the linear slope equation with coefficients frozen on ``sol``.

    Returns ``v`` on the physical-time layout of ``sol.u`` (row ``k`` is time
    ``k*dt``). Dirichlet grids take boundary values from ``sol.ux``; linear
    grids extrapolate.
    """
    if sol.ux is None:
        derivative_fields(sol)
    ex = derivative_pde_exprs(cs)
    K, dx, dt, om = grid.K, grid.dx, grid.dt, grid.omega

    def coeffs_at(n):
        # reversed level n is physical row K - n
        env = _fields_env(sol, K - n, slice(1, -1))
        return tuple(np.broadcast_to(evaluate(ex[name], env), env["x"].shape)
                     for name in ("a", "b", "c", "q"))

    def apply(coef, v):
        a, b, c, q = coef
        vx = (v[2:] - v[:-2]) / (2.0 * dx)
        vxx = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / dx ** 2
        return a * vxx + b * vx + c * v[1:-1] + q

    vrev = np.empty((K + 1, grid.J + 1))
    vrev[0] = evaluate(cs["h_x"], {"x": grid.x})
    coef_old = coeffs_at(0)
    for n in range(K):
        coef = coeffs_at(n + 1)
        a, b, c, q = coef
        rhs = vrev[n][1:-1] + dt * (1.0 - om) * apply(coef_old, vrev[n]) + dt * om * q
        lo = -dt * om * (a / dx ** 2 - b / (2.0 * dx))
        up = -dt * om * (a / dx ** 2 + b / (2.0 * dx))
        di = 1.0 - dt * om * (-2.0 * a / dx ** 2 + c)
        if grid.boundary == "dirichlet":
            left, right = sol.ux[K - n - 1, 0], sol.ux[K - n - 1, -1]
            rhs = rhs.copy()
            rhs[0] -= lo[0] * left
            rhs[-1] -= up[-1] * right
            new = np.empty(grid.J + 1)
            new[1:-1] = thomas_solve(lo, di, up, rhs)
            new[0], new[-1] = left, right
        else:
            new = _solve_interior(lo, di, up, rhs, "linear")
        vrev[n + 1] = new
        coef_old = coef
    return vrev[::-1].copy()


# ---------------------------------------------------------------------------
# comparison-theorem lower bounds
# ---------------------------------------------------------------------------

@dataclass
class LowerBoundCurves:
    """Lower bounds on the reversed clock ``t_rev`` (``t_rev = 0`` is ``t = T``).

    ``m_*`` bound ``sign * u_x``, ``rho_*`` bound ``u_xx``. ``sign`` is +1
    under (A5)(a) or (A5'), -1 under (A5)(b).
    """

    t_rev: np.ndarray
    mode: str
    sign: float
    m_emp: np.ndarray
    m_th: np.ndarray
    G: float
    C: float
    rho_emp: np.ndarray = None
    rho_th: np.ndarray = None
    G2: float = None
    C2: float = None
    degenerate: bool = False
    diagnostics: list = field(default_factory=list)

    def m(self, t, variant="theoretical", T=None):
        """Value of the chosen ``m`` curve at physical time ``t``."""
        return self._at(self.m_th if variant == "theoretical" else self.m_emp, t, T)

    def rho(self, t, variant="theoretical", T=None):
        arr = self.rho_th if variant == "theoretical" else self.rho_emp
        if arr is None:
            return 0.0
        return self._at(arr, t, T)

    def _at(self, arr, t, T):
        T = self.t_rev[-1] if T is None else T
        return float(np.interp(T - t, self.t_rev, arr))


def _linear_comparison(G, C, t):
    if C <= 0.0:
        return G * t
    return (G / C) * (1.0 - np.exp(-C * t))


def lower_bound_curves(sol: PdeSolution, cs: CoefficientSet, report):
    """Empirical and comparison-theorem lower bounds for ``u_x`` and ``u_xx``.

    ``report`` is an :class:`~fbsde_gauss.assumptions.AssumptionReport`; its
    (A5)/(A5')/(A8) items decide the sign mode. With constant bounds ``G`` on
    the forcing and ``C`` on the zeroth-order coefficient the curve
    ``(G/C)(1 - exp(-C t))`` solves ``m' = G - C m``, which keeps the shifted
    slope a supersolution.
    """
    g = sol.grid
    mode, sign = report.slope_mode()
    if mode is None:
        raise ValueError("cannot build lower bounds: neither (A5)(a), (A5)(b) nor (A5') "
                         "holds on the sampled region; see the assumption report")
    K = g.K
    t_rev = g.t
    r = report.region
    cols = sol.trusted & (g.x >= r.x_lo - EPS_GRID) & (g.x <= r.x_hi + EPS_GRID)
    if not np.any(cols):
        raise ValueError("the assumption region contains no trusted grid column")
    vrev = sol.ux[::-1][:, cols]
    m_emp = np.min(sign * vrev, axis=1)

    G = report.constants["inf_gx"] if sign > 0 else -report.constants["sup_gx"]
    G = max(float(G), 0.0)
    ex = derivative_pde_exprs(cs)
    C = 0.0
    for k in range(K + 1):
        C = max(C, float(np.max(np.abs(evaluate(ex["c"], _fields_env(sol, k, cols))))))
    m_th = _linear_comparison(G, C, t_rev)
    curves = LowerBoundCurves(t_rev=t_rev, mode=mode, sign=sign, m_emp=m_emp, m_th=m_th,
                              G=G, C=C, degenerate=G <= 0.0)
    if curves.degenerate:
        curves.diagnostics.append("inf d_x g is zero on the region: theoretical slope bound "
                                  "vanishes and the Y envelopes degenerate")
    if np.any(m_emp < m_th - EPS_GRID):
        k = int(np.argmax(m_th - m_emp))
        curves.diagnostics.append(f"empirical slope bound below theoretical at t_rev={t_rev[k]:.6g}: "
                                  f"{m_emp[k]:.6g} < {m_th[k]:.6g}")

    if report.curvature_ready():
        uxx_rev = sol.uxx[::-1][:, cols]
        curves.rho_emp = np.min(uxx_rev, axis=1)
        if np.min(sol.ux[:, cols]) < -EPS_GRID:
            curves.diagnostics.append("u_x takes negative values; curvature bound not emitted")
        else:
            cx = curvature_pde_exprs(cs)
            C2 = 0.0
            for k in range(K + 1):
                C2 = max(C2, float(np.max(np.abs(evaluate(cx["P"], _fields_env(sol, k, cols))))))
            G2 = max(float(report.constants["inf_gxx"]), 0.0)
            curves.G2, curves.C2 = G2, C2
            curves.rho_th = _linear_comparison(G2, C2, t_rev)
            if np.any(curves.rho_emp < curves.rho_th - EPS_GRID):
                k = int(np.argmax(curves.rho_th - curves.rho_emp))
                curves.diagnostics.append(
                    f"empirical curvature bound below theoretical at t_rev={t_rev[k]:.6g}")
    for msg in curves.diagnostics:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return curves
