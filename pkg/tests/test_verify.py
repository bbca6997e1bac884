import math

import numpy as np
import pytest

from fbsde_gauss.bounds import BoundConstants, EnvelopeParams
from fbsde_gauss.coeffs import CoefficientSet
from fbsde_gauss.sde import DrivingCoefficients, simulate_paths
from fbsde_gauss.verify import (DegenerateSampleError, NotSolvableError, absdev_estimate,
                                check_envelope, check_malliavin_bounds, check_tails,
                                discrepancy_appendix, estimate_density, gaussian_oracle,
                                oracle_distance, overlay_svg, silverman_bandwidth)


@pytest.fixture(scope="module")
def normals():
    return np.random.default_rng(123).standard_normal(100_000)


@pytest.fixture(scope="module")
def normal_kde(normals):
    return estimate_density(normals, n_boot=50, seed=1)


def test_kde_of_standard_normal(normal_kde, normals):
    de = normal_kde
    i0 = int(np.argmin(np.abs(de.grid)))
    assert de.values[i0] == pytest.approx(1 / math.sqrt(2 * math.pi), abs=0.01)
    assert de.integral() == pytest.approx(1.0, abs=1e-3)
    assert np.all(de.values >= 0) and np.all(de.stderr >= 0)
    core = np.abs(de.grid) < 3
    assert np.all(de.stderr[core] > 0)
    assert de.bandwidth == silverman_bandwidth(normals)
    assert de.grid.size == 513
    assert de.n == 100_000


def test_kde_bootstrap_is_seeded(normals):
    a = estimate_density(normals[:5000], n_boot=20, seed=4)
    b = estimate_density(normals[:5000], n_boot=20, seed=4, threads=3)
    c = estimate_density(normals[:5000], n_boot=20, seed=5)
    assert np.array_equal(a.stderr, b.stderr) and np.array_equal(a.values, b.values)
    assert not np.array_equal(a.stderr, c.stderr)


def test_fixed_bandwidth_and_window():
    x = np.random.default_rng(0).standard_normal(2000)
    de = estimate_density(x, window=(-2.0, 2.0), bandwidth_rule="fixed", bandwidth=0.3, n_boot=5)
    assert de.bandwidth == 0.3 and de.window == (-2.0, 2.0)
    assert de.grid[0] == -2.0 and de.grid[-1] == 2.0


def test_sample_size_and_grid_checks():
    with pytest.raises(ValueError, match="1000"):
        estimate_density(np.arange(10.0))
    with pytest.raises(ValueError, match="divide"):
        estimate_density(np.arange(2000.0), n_eval=400)


def test_constant_samples_are_degenerate():
    with pytest.raises(DegenerateSampleError):
        estimate_density(np.full(2000, 2.5))


def test_exact_envelope_passes_and_halved_L_fails(normal_kde, normals):
    absdev, se = absdev_estimate(normals)
    assert absdev == pytest.approx(math.sqrt(2 / math.pi), abs=0.01)
    ep = EnvelopeParams(0.0, absdev, 1.0, 1.0)
    ok = check_envelope(normal_kde, ep, absdev_se=se)
    assert ok["passed"] and ok["violation_measure"] <= 0.01 * ok["window_width"]
    bad = check_envelope(normal_kde, ep.halved_L(), absdev_se=se)
    assert not bad["passed"] and bad["fails"]
    assert all(f["margin"] > 0 for f in bad["fails"])


def test_tails_verdicts(normals):
    rows = check_tails(normals, 0.0, 1.0, [1.0, 2.0])
    assert {r["verdict"] for r in rows} == {"pass"}
    lo, hi = rows[0]["ci99"]
    assert lo <= rows[0]["fraction"] <= hi
    bad = check_tails(normals, 0.0, 0.25, [1.0])
    assert {r["verdict"] for r in bad} == {"fail"}
    # a bound below the 1/n resolution can never pass
    tiny = check_tails(normals[:100], 0.0, 1.0, [4.0])
    assert {r["verdict"] for r in tiny} == {"inconclusive"}
    with pytest.raises(ValueError):
        check_tails(normals, 0.0, 1.0, [0.0])


def test_gaussian_oracle_ou():
    cs = CoefficientSet.from_strings(f="-x", h="2*x + 1")
    o = gaussian_oracle(cs, 0.5, 1.0, 1.0)
    assert o["X"][0] == pytest.approx(0.5 * math.exp(-1))
    assert o["X"][1] == pytest.approx((1 - math.exp(-2)) / 2)
    assert o["Y"] == pytest.approx((2 * o["X"][0] + 1, 4 * o["X"][1]))
    assert o["Z"] == (2.0, 0.0)
    half = gaussian_oracle(cs, 0.5, 1.0, 0.5)
    assert half["Z"][0] == pytest.approx(2 * math.exp(-0.5))
    with pytest.raises(NotSolvableError):
        gaussian_oracle(CoefficientSet.from_strings(f="sin(x)"), 0.0, 1.0, 1.0)
    with pytest.raises(NotSolvableError):
        gaussian_oracle(CoefficientSet.from_strings(g="1"), 0.0, 1.0, 1.0)


def test_oracle_distance(normal_kde):
    assert oracle_distance(normal_kde, 0.0, 1.0)["passed"]
    assert not oracle_distance(normal_kde, 0.0, 1.5)["passed"]


@pytest.fixture(scope="module")
def ou_paths():
    dc = DrivingCoefficients.from_exprs("-x", "1", 1.0, x_lo=-10, x_hi=10)
    return dc, simulate_paths(dc, 0.5, 5000, 100, seed=3)


def test_malliavin_fraction(ou_paths):
    dc, ps = ou_paths
    bc = BoundConstants.constant(1.0, 1.0, dc.M_psi())
    assert check_malliavin_bounds(ps, bc)["fraction"] == 1.0
    res = check_malliavin_bounds(ps, bc.with_M_psi(0.0))
    assert res["fraction"] < 0.5 and res["n"] == 5000 * len(ps.pairs)


def test_discrepancy_appendix(ou_paths):
    _, ps = ou_paths
    rows = discrepancy_appendix(ps, analytic=lambda r, t: math.exp(-(t - r)))
    for row in rows:
        assert row["first-variation_vs_analytic_max_rel"] < 1e-12
        assert row["lamperti_vs_first_variation_max_rel"] < 1e-12
        if row["t"] > row["r"]:
            assert row["paper-dx_vs_analytic_max_rel"] > 0.1


def test_overlay_svg(tmp_path, normal_kde):
    de = normal_kde
    lo = np.zeros_like(de.grid)
    p = tmp_path / "o.svg"
    overlay_svg(p, de.grid, lo, de.values * 2, de.values, de.stderr, title="X at t=1")
    text = p.read_text()
    assert text.startswith("<svg") and "X at t=1" in text and text.count("<polyline") >= 3
