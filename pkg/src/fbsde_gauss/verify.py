"""Statistical checks of simulated laws against the Gaussian envelopes.

Budgets are explicit: a density point passes when the KDE lies inside the
envelope widened by ``z`` bootstrap standard errors plus a kernel-bias budget,
and "almost every x" means the failing points cover at most
``violation_fraction`` of the window.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from ._kernels import linear_bin
from .bounds import EnvelopeParams, envelope_density, tail_bound

__all__ = [
    "DensityEstimate", "DegenerateSampleError", "NotSolvableError",
    "estimate_density", "check_envelope", "check_tails", "check_malliavin_bounds",
    "gaussian_oracle", "silverman_bandwidth", "BUDGET_HEADER", "absdev_estimate",
    "oracle_distance", "discrepancy_appendix", "overlay_svg",
]

BUDGET_HEADER = ("density: KDE within envelope +/- (z * bootstrap stderr + C_b h^2), "
                 "failing points may cover at most the stated fraction of the window; "
                 "tails: Clopper-Pearson 99% interval of the empirical survival fraction "
                 "compared with the bound; Malliavin: pathwise interval with "
                 "discretisation tolerance")
N_BINS = 4097
DEGENERATE_VAR = 1e-12


class DegenerateSampleError(ValueError):
    pass


class NotSolvableError(ValueError):
    pass


@dataclass
class DensityEstimate:
    grid: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    bandwidth: float
    bias_budget: float
    n: int
    window: tuple
    bin_grid: np.ndarray = field(repr=False, default=None)
    bin_values: np.ndarray = field(repr=False, default=None)

    def integral(self):
        return float(np.trapezoid(self.bin_values, self.bin_grid))


def silverman_bandwidth(x):
    std = np.std(x)
    q75, q25 = np.percentile(x, [75, 25])
    a = min(std, (q75 - q25) / 1.34) if q75 > q25 else std
    return 0.9 * a * x.size ** (-0.2)


def _binned_kde(samples, lo, delta, n_bins, h, n_total):
    counts = linear_bin(samples, lo, delta, n_bins)
    half = int(np.ceil(6.0 * h / delta))
    k = np.arange(-half, half + 1) * delta
    kern = np.exp(-0.5 * (k / h) ** 2) / (np.sqrt(2.0 * np.pi) * h)
    return np.convolve(counts, kern, mode="same") / n_total


def estimate_density(samples, window=None, bandwidth_rule="silverman", bandwidth=None,
                     n_boot=200, seed=0, n_eval=513, threads=1):
    """Gaussian-kernel KDE with path-level bootstrap standard errors.

    The KDE is computed on a fine linear-binning grid over ``window`` (default
    mean +/- 8 std) and reported on ``n_eval`` evenly spaced bin centres, so
    ``n_eval - 1`` must divide ``N_BINS - 1``.
    Resample ``b`` uses generator ``default_rng([seed, b])``.
    """
    if n_eval < 2 or (N_BINS - 1) % (n_eval - 1):
        raise ValueError(f"n_eval - 1 must divide {N_BINS - 1}")
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 1000:
        raise ValueError("need at least 1000 samples")
    var = float(np.var(x))
    if var < DEGENERATE_VAR:
        raise DegenerateSampleError(f"sample variance {var:.3e} is degenerate")
    mean, std = float(np.mean(x)), float(np.sqrt(var))
    lo, hi = (mean - 8 * std, mean + 8 * std) if window is None else map(float, window)
    if bandwidth_rule == "silverman":
        h = silverman_bandwidth(x)
    elif bandwidth_rule == "fixed":
        if bandwidth is None or not bandwidth > 0:
            raise ValueError("fixed bandwidth rule needs a positive bandwidth")
        h = float(bandwidth)
    else:
        raise ValueError(f"unknown bandwidth rule {bandwidth_rule!r}")
    delta = (hi - lo) / (N_BINS - 1)
    bin_grid = lo + delta * np.arange(N_BINS)
    dens = _binned_kde(x, lo, delta, N_BINS, h, x.size)

    def boot(b):
        rng = np.random.default_rng([seed, b])
        idx = rng.integers(0, x.size, size=x.size)
        return _binned_kde(x[idx], lo, delta, N_BINS, h, x.size)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            reps = list(ex.map(boot, range(n_boot)))
    else:
        reps = [boot(b) for b in range(n_boot)]
    se = np.std(np.array(reps), axis=0, ddof=1)
    # kernel bias ~ h^2/2 * f''; budget with the sup of the estimated curvature
    curv = np.abs(np.diff(dens, 2)) / delta ** 2
    bias = 0.5 * float(np.max(curv)) * h * h
    step = (N_BINS - 1) // (n_eval - 1)
    sel = slice(0, N_BINS, step)
    return DensityEstimate(grid=bin_grid[sel], values=dens[sel], stderr=se[sel], bandwidth=h,
                           bias_budget=bias, n=int(x.size), window=(lo, hi),
                           bin_grid=bin_grid, bin_values=dens)


def check_envelope(de: DensityEstimate, ep: EnvelopeParams, z=3.0, violation_fraction=0.01,
                   absdev_se=0.0):
    """Pointwise envelope verdicts and the overall measure-based decision.

    ``absdev_se`` is the standard error of the estimated ``E|F - E F|``; the
    lower envelope uses ``absdev - z se`` and the upper one ``absdev + z se``.
    """
    a = ep.absdev
    lower = envelope_density(de.grid, replace(ep, absdev=max(a - z * absdev_se, 0.0)))[0]
    upper = envelope_density(de.grid, replace(ep, absdev=a + z * absdev_se))[1]
    slack = z * de.stderr + de.bias_budget
    ok = (lower - slack <= de.values) & (de.values <= upper + slack)
    dx = de.grid[1] - de.grid[0]
    measure = float(np.count_nonzero(~ok) * dx)
    width = de.window[1] - de.window[0]
    fails = [{"x": float(de.grid[i]), "kde": float(de.values[i]), "stderr": float(de.stderr[i]),
              "lower": float(lower[i]), "upper": float(upper[i]),
              "margin": float(max(lower[i] - slack[i] - de.values[i],
                                  de.values[i] - upper[i] - slack[i]))}
             for i in np.flatnonzero(~ok)]
    return {"passed": measure <= violation_fraction * width, "points_ok": ok,
            "violation_measure": measure, "window_width": width, "fails": fails,
            "lower": lower, "upper": upper}


def _clopper_pearson(k, n, level=0.99):
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def check_tails(samples, mean, L, probe_xs):
    """Tail verdicts at each probe for both sides.

    ``pass``: the 99% Clopper-Pearson upper limit is below the bound.
    ``fail``: the lower limit is above the bound.
    ``inconclusive``: neither, which includes every probe whose bound is
    below the 1/n resolution of the sample.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    out = []
    for px in probe_xs:
        if not px > 0:
            raise ValueError("tail probes must be positive")
        for side in ("upper", "lower"):
            k = int(np.count_nonzero(x >= px) if side == "upper" else np.count_nonzero(x <= -px))
            bound = tail_bound(px, mean, L, side)
            lo, hi = _clopper_pearson(k, n)
            if hi <= bound:
                verdict = "pass"
            elif lo > bound:
                verdict = "fail"
            else:
                verdict = "inconclusive"
            if bound < 1.0 / n and verdict == "pass":
                verdict = "inconclusive"
            out.append({"x": float(px), "side": side, "count": k, "n": n, "fraction": k / n,
                        "ci99": [lo, hi], "bound": float(bound), "verdict": verdict})
    return out


def check_malliavin_bounds(ps, bc, mode="X", representation="first-variation", sigma_x_sup=0.0,
                           y_sign=None, rho_variant=None):
    """Fraction of sampled ``(path, r, t)`` inside the pathwise interval.

    X: ``[nu e^{-M_psi t}, mu e^{M_psi t}]``; Y: ``[m nu e^{-M_psi t},
    M1 mu e^{M_psi t}]`` after folding the sign; Z: ``[nu^2 rho e^{-M_psi t},
    mu gamma e^{M_psi t}]``. The tolerance is three discretisation standard
    errors of the Ito exponent, ``3 sup|sigma~_x| sqrt(dt t)`` relative, plus
    a 1e-9 floor.
    """
    keep = ps.kept()
    inside = total = 0
    signs = []
    for (r, t) in ps.pairs:
        if mode == "X":
            d = ps.D[(representation, r, t)][keep]
            lo, hi = bc.nu * np.exp(-bc.M_psi * t), bc.mu * np.exp(bc.M_psi * t)
        elif mode == "Y":
            raw = ps.DY[(r, t)][keep]
            s = np.sign(np.median(raw)) if y_sign is None else y_sign
            signs.append(s)
            d = s * raw
            lo, hi = bc.m(t) * bc.nu * np.exp(-bc.M_psi * t), bc.M1 * bc.mu * np.exp(bc.M_psi * t)
        else:
            d = ps.DZ[(r, t)][keep]
            lo, hi = bc.nu ** 2 * bc.rho(t) * np.exp(-bc.M_psi * t), bc.mu * bc.gamma * np.exp(bc.M_psi * t)
        rel = 3.0 * sigma_x_sup * np.sqrt(ps.dt * t) + 1e-9
        ok = (d >= lo * (1 - rel) - 1e-12) & (d <= hi * (1 + rel) + 1e-12)
        inside += int(np.count_nonzero(ok))
        total += d.size
    frac = inside / total if total else float("nan")
    res = {"fraction": frac, "n": total}
    if mode == "Y":
        raw_all = np.concatenate([ps.DY[k][keep] for k in ps.pairs])
        res["sign_coherent"] = bool(np.all(raw_all >= 0) or np.all(raw_all <= 0))
    return res


def _const_on(e, T, xs):
    from .coeffs import evaluate
    vals = []
    for t in np.linspace(0.0, T, 5):
        env = {"t": t, "x": xs, "u": np.linspace(-3, 3, xs.size), "p": np.linspace(-2, 2, xs.size)}
        vals.append(np.broadcast_to(evaluate(e, env), xs.shape))
    v = np.concatenate(vals)
    return float(v[0]) if np.allclose(v, v[0], rtol=0, atol=1e-12) else None


def gaussian_oracle(cs, x0, T, t):
    """Exact laws when ``f = a x + b`` (no u, p, t), constant sigma, ``g = 0``, affine ``h``.

    Returns ``{"X": (mean, var), "Y": (mean, var), "Z": (mean, var)}``; a
    zero variance marks a point mass.
    """
    xs = np.linspace(-3.0, 3.0, 13)
    a = _const_on(cs["f_x"], T, xs)
    b_val = None
    checks = [_const_on(cs[n], T, xs) for n in ("f_u", "f_p", "f_t", "sigma_x", "sigma_u", "sigma_t")]
    sig = _const_on(cs.sigma, T, xs)
    g0 = _const_on(cs.g, T, xs)
    alpha = _const_on(cs["h_x"], T, xs)
    if a is not None:
        from .coeffs import evaluate
        b_val = float(evaluate(cs.f, {"t": 0.0, "x": 0.0, "u": 0.0, "p": 0.0}))
    if (a is None or b_val is None or sig is None or alpha is None or g0 != 0.0
            or any(c != 0.0 for c in checks)):
        raise NotSolvableError("configuration is not in the linear-Gaussian class")
    from .coeffs import evaluate
    beta = float(evaluate(cs.h, {"x": 0.0}))

    def flow(tau):
        return np.exp(a * tau)

    def drift_int(tau):
        return tau if a == 0 else (np.exp(a * tau) - 1.0) / a

    def var_int(tau):
        return tau if a == 0 else (np.exp(2 * a * tau) - 1.0) / (2 * a)

    mx = x0 * flow(t) + b_val * drift_int(t)
    vx = sig ** 2 * var_int(t)
    # u(t, x) = alpha (x e^{a(T-t)} + b drift_int(T-t)) + beta
    slope = alpha * flow(T - t)
    shift = alpha * b_val * drift_int(T - t) + beta
    return {"X": (float(mx), float(vx)), "Y": (float(slope * mx + shift), float(slope ** 2 * vx)),
            "Z": (float(slope * sig), 0.0)}


def absdev_estimate(samples):
    """``E|F - E F|`` and its standard error."""
    x = np.asarray(samples, dtype=np.float64)
    d = np.abs(x - np.mean(x))
    return float(np.mean(d)), float(np.std(d, ddof=1) / np.sqrt(x.size))


def oracle_distance(de: DensityEstimate, mean, var, z=3.0):
    """Sup distance of the KDE to ``N(mean, var)`` on the central 95% window."""
    sd = np.sqrt(var)
    inside = np.abs(de.grid - mean) <= 1.959964 * sd
    exact = stats.norm.pdf(de.grid[inside], mean, sd)
    gap = np.abs(de.values[inside] - exact)
    budget = z * (de.stderr[inside] + de.bias_budget)
    return {"sup_distance": float(np.max(gap)), "passed": bool(np.all(gap <= budget)),
            "worst_ratio": float(np.max(gap / budget))}


def discrepancy_appendix(ps, analytic=None):
    """Pathwise comparison of the ``D_r X_t`` representations.

    ``analytic(r, t)`` may supply the exact value for linear-drift,
    constant-diffusion configurations.
    """
    keep = ps.kept()
    rows = []
    for (r, t) in ps.pairs:
        fv = ps.D[("first-variation", r, t)][keep]
        row = {"r": r, "t": t, "first_variation_mean": float(np.mean(fv))}
        for rep in ("paper-dx", "lamperti"):
            d = ps.D[(rep, r, t)][keep]
            rel = np.abs(d - fv) / np.maximum(np.abs(fv), 1e-300)
            row[f"{rep}_mean"] = float(np.mean(d))
            row[f"{rep}_vs_first_variation_max_rel"] = float(np.max(rel))
        if analytic is not None:
            a = float(analytic(r, t))
            row["analytic"] = a
            for rep in ("first-variation", "paper-dx", "lamperti"):
                d = ps.D[(rep, r, t)][keep]
                row[f"{rep}_vs_analytic_max_rel"] = float(np.max(np.abs(d - a)) / abs(a))
        rows.append(row)
    return rows


def _fmt(v):
    return f"{v:.2f}"


def overlay_svg(path, xs, lower, upper, kde, stderr, z=3.0, title=""):
    """Envelope curves, KDE and its shaded ``z`` stderr band as a standalone SVG."""
    W, H, pad = 640, 400, 50
    xs = np.asarray(xs)
    top = float(max(np.max(upper[np.isfinite(upper)]), np.max(kde + z * stderr)))
    ymax = min(top, 1.5 * float(np.max(kde + z * stderr))) * 1.05
    x0, x1 = float(xs[0]), float(xs[-1])

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (W - 2 * pad)

    def sy(v):
        return H - pad - np.clip(v, 0.0, ymax) / ymax * (H - 2 * pad)

    def poly(ys):
        return " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(xs, ys))

    band_lo = np.maximum(kde - z * stderr, 0.0)
    band = poly(kde + z * stderr) + " " + " ".join(
        f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(xs[::-1], band_lo[::-1]))
    ticks = []
    for v in np.linspace(x0, x1, 5):
        ticks.append(f'<text x="{_fmt(sx(v))}" y="{H - pad + 18}" font-size="11" '
                     f'text-anchor="middle">{v:.3g}</text>')
    for v in np.linspace(0.0, ymax, 5):
        ticks.append(f'<text x="{pad - 6}" y="{_fmt(sy(v) + 4)}" font-size="11" '
                     f'text-anchor="end">{v:.3g}</text>')
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W // 2}" y="20" font-size="13" text-anchor="middle">{title}</text>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        *ticks,
        f'<polygon points="{band}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>',
        f'<polyline points="{poly(lower)}" fill="none" stroke="#d62728" stroke-width="1.5"/>',
        f'<polyline points="{poly(upper)}" fill="none" stroke="#2ca02c" stroke-width="1.5"/>',
        f'<polyline points="{poly(kde)}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>',
        f'<text x="{W - pad}" y="{pad}" font-size="11" text-anchor="end" fill="#2ca02c">upper envelope</text>',
        f'<text x="{W - pad}" y="{pad + 14}" font-size="11" text-anchor="end" fill="#1f77b4">KDE</text>',
        f'<text x="{W - pad}" y="{pad + 28}" font-size="11" text-anchor="end" fill="#d62728">lower envelope</text>',
        "</svg>",
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
