import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from fbsde_gauss.bounds import (BoundConstants, EnvelopeParams, EnvelopeRefused, envelope_density,
                                tail_bound, write_envelope_csv, x_constants, y_constants,
                                z_constants)


def test_x_constants_closed_form():
    assert x_constants(1.0, BoundConstants.constant(1.0, 1.0, 0.0)) == (1.0, 1.0)
    xi, Xi = x_constants(0.5, BoundConstants.constant(0.8, 1.2, 0.3))
    assert xi == pytest.approx(0.5 * 0.64 * math.exp(-0.3), rel=1e-14)
    assert xi == pytest.approx(0.237062, abs=1e-6)
    assert Xi == pytest.approx(0.5 * 1.44 * math.exp(0.3), rel=1e-14)
    assert Xi == pytest.approx(0.971898, abs=1e-6)


def test_y_constants_closed_form():
    bc = BoundConstants.constant(1.0, 1.0, 0.0, M1=1.0, m=1.0)
    assert y_constants(0.7, bc) == pytest.approx((0.7, 0.7), rel=1e-15)
    bc = BoundConstants.constant(0.8, 1.2, 0.3, M1=2.0, m=0.3160)
    lam, Lam = y_constants(0.5, bc)
    assert lam == pytest.approx(0.5 * (0.3160 * 0.8 * math.exp(-0.15)) ** 2, rel=1e-14)
    assert lam == pytest.approx(0.023672, abs=1e-6)
    assert Lam == pytest.approx(0.5 * (2 * 1.2 * math.exp(0.15)) ** 2, rel=1e-14)
    assert Lam == pytest.approx(3.887593, abs=1e-6)


def test_z_constants_closed_form():
    bc = BoundConstants.constant(1.0, 1.0, 0.0, gamma=1.0, rho=1.0)
    assert z_constants(0.3, bc) == pytest.approx((0.3, 0.3), rel=1e-15)
    bc = BoundConstants.constant(1.0, 1.2, 0.1, gamma=2.5, rho=0.5)
    _, Sig = z_constants(1.0, bc)
    assert Sig == pytest.approx(1.44 * 6.25 * math.exp(0.2), rel=1e-14)
    assert Sig == pytest.approx(10.992625, abs=1e-6)


def test_refusals_and_bad_inputs():
    bc = BoundConstants.constant(1.0, 1.0, 0.0)
    with pytest.raises(EnvelopeRefused, match="A5"):
        y_constants(0.5, bc)
    with pytest.raises(EnvelopeRefused, match="A8"):
        z_constants(0.5, bc)
    for f in (x_constants, y_constants, z_constants):
        with pytest.raises(ValueError):
            f(0.0, bc)
    with pytest.raises(ValueError):
        BoundConstants.constant(2.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        BoundConstants.constant(1.0, 1.0, -0.1)
    with pytest.raises(ValueError):
        EnvelopeParams(0.0, 1.0, 2.0, 1.0)
    with pytest.raises(ValueError):
        EnvelopeParams(0.0, -1.0, 1.0, 1.0)


def test_time_dependent_curves_are_read_at_t():
    bc = BoundConstants(nu=1.0, mu=1.0, M=1.0, M1=1.0, M_psi=0.0, m=lambda t: t, rho=lambda t: 2 * t)
    assert y_constants(0.5, bc)[0] == pytest.approx(0.125)
    assert z_constants(0.5, bc)[0] == pytest.approx(0.5)
    assert bc.with_M_psi(0.0) == bc
    assert bc.with_M_psi(1.0).M_psi == 1.0


@settings(max_examples=200, deadline=None)
@given(t=st.floats(1e-3, 5.0), nu=st.floats(0.1, 2.0), ratio=st.floats(1.0, 3.0),
       mpsi=st.floats(0.0, 2.0), m=st.floats(0.01, 1.0), M1=st.floats(1.0, 3.0),
       rho=st.floats(0.01, 1.0))
def test_orderings_and_linear_scaling(t, nu, ratio, mpsi, m, M1, rho):
    mu = nu * ratio
    gamma = rho * nu
    bc = BoundConstants.constant(nu, mu, mpsi, M1=M1, gamma=gamma, m=m, rho=rho)
    for f in (x_constants, y_constants, z_constants):
        lo, hi = f(t, bc)
        assert 0 < lo <= hi * (1 + 1e-12)
    flat = BoundConstants.constant(nu, mu, 0.0, M1=M1, gamma=gamma, m=m, rho=rho)
    for f in (x_constants, y_constants, z_constants):
        a, b = f(t, flat), f(1.0, flat)
        assert a[0] == pytest.approx(t * b[0], rel=1e-12)
        assert a[1] == pytest.approx(t * b[1], rel=1e-12)


def test_envelope_identity_and_collapse():
    ep = EnvelopeParams(0.0, math.sqrt(2 / math.pi), 1.0, 1.0)
    xs = np.linspace(-6, 6, 1201)
    lo, hi = envelope_density(xs, ep)
    pdf = np.exp(-xs ** 2 / 2) / math.sqrt(2 * math.pi)
    assert np.max(np.abs(lo - pdf)) <= 1e-12 and np.array_equal(lo, hi)
    assert envelope_density(0.0, ep)[0] == pytest.approx(0.398942, abs=1e-6)
    ep2 = EnvelopeParams(0.3, 0.7, 0.5, 2.0)
    assert envelope_density(0.3, ep2) == pytest.approx((0.7 / 4.0, 0.7 / 1.0))
    lo2, hi2 = envelope_density(xs, ep2)
    assert np.all(lo2 <= hi2)


def test_envelope_integrals():
    ep = EnvelopeParams(0.0, 0.6, 0.5, 1.5)
    up = quad(lambda x: envelope_density(x, ep)[1], -20, 20)[0]
    low = quad(lambda x: envelope_density(x, ep)[0], -20, 20)[0]
    # absdev <= sqrt(l) * sqrt(2/pi) bounds the lower mass by one
    assert low == pytest.approx(0.6 / 3.0 * math.sqrt(2 * math.pi * 0.5), rel=1e-8)
    assert up == pytest.approx(0.6 / 1.0 * math.sqrt(2 * math.pi * 1.5), rel=1e-8)


def test_halved_L_keeps_order():
    ep = EnvelopeParams(0.0, 0.5, 0.8, 1.0).halved_L()
    assert ep.L == 0.5 and ep.l == 0.5


def test_tail_bound():
    assert tail_bound(1.0, 0.0, 1.0) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert tail_bound(1.0, 0.0, 1.0) == pytest.approx(0.606531, abs=1e-6)
    assert tail_bound(0.4, 0.4, 2.0) == 1.0
    assert tail_bound(1.0, 0.5, 1.0, side="lower") == pytest.approx(math.exp(-1.125))
    xs = np.linspace(0.6, 5, 50)
    assert np.all(np.diff(tail_bound(xs, 0.5, 1.0)) < 0)
    with pytest.raises(ValueError):
        tail_bound(0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        tail_bound(1.0, 0.0, 1.0, side="both")


def test_envelope_csv(tmp_path):
    xs = np.array([0.0, 1.0])
    p = tmp_path / "env.csv"
    write_envelope_csv(p, xs, xs, xs + 1)
    assert p.read_text().splitlines() == ["x,lower,upper", "0.0,0.0,1.0", "1.0,1.0,2.0"]
