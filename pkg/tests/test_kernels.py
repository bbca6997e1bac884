import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.linalg import solve_banded
from scipy import stats

from fbsde_gauss import _kernels as K


def _system(n, seed=0):
    rng = np.random.default_rng(seed)
    lower = rng.uniform(-1, 0, n)
    upper = rng.uniform(-1, 0, n)
    diag = 2.5 + rng.uniform(0, 1, n)
    rhs = rng.standard_normal(n)
    return lower, diag, upper, rhs


def test_thomas_matches_banded_solver():
    lower, diag, upper, rhs = _system(200)
    ab = np.zeros((3, 200))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    np.testing.assert_allclose(K.thomas_solve(lower, diag, upper, rhs), solve_banded((1, 1), ab, rhs),
                               rtol=1e-12, atol=1e-13)


def test_counter_normals_are_standard_normal():
    z = K.counter_normals(42, np.arange(200_000), 5)
    assert abs(np.mean(z)) < 4 / np.sqrt(z.size)
    assert abs(np.var(z) - 1) < 0.01
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_counter_normals_replay_single_path():
    ids = np.arange(1000)
    full = K.counter_normals(7, ids, 13)
    for i in (0, 17, 999):
        assert K.counter_normals(7, [i], 13)[0] == full[i]
    assert not np.array_equal(full, K.counter_normals(7, ids, 14))
    assert not np.array_equal(full, K.counter_normals(8, ids, 13))


def test_cubic_interp_exact_on_cubics_and_clamped():
    x_lo, dx, n = -2.0, 0.1, 41
    xs = x_lo + dx * np.arange(n)
    fields = np.stack([xs ** 3 - xs, 2 * xs + 1])
    q = np.linspace(-1.7, 1.7, 57)
    out = K.cubic_interp(x_lo, dx, fields, q)
    np.testing.assert_allclose(out[0], q ** 3 - q, atol=1e-12)
    np.testing.assert_allclose(out[1], 2 * q + 1, atol=1e-12)
    edge = K.cubic_interp(x_lo, dx, fields, np.array([-5.0, 5.0]))
    np.testing.assert_allclose(edge[1], [2 * xs[0] + 1, 2 * xs[-1] + 1], atol=1e-12)


def test_linear_bin_conserves_mass():
    rng = np.random.default_rng(3)
    s = rng.standard_normal(10_000)
    c = K.linear_bin(s, -8.0, 16.0 / 512, 513)
    assert c.sum() == pytest.approx(10_000, abs=1e-9)
    assert np.all(c >= 0)


@pytest.mark.skipif(not K.USE_NUMBA, reason="numba backend disabled")
def test_backends_agree():
    # libm log/cos differ between the backends in the last ulp at most
    lower, diag, upper, rhs = _system(300, 1)
    np.testing.assert_array_equal(K._thomas_nb(lower, diag, upper, rhs),
                                  K.numpy_kernels["thomas_solve"](lower, diag, upper, rhs))
    ids = np.arange(5000, dtype=np.int64)
    np.testing.assert_allclose(K._normals_nb(np.uint64(9), ids, np.int64(4)),
                               K.numpy_kernels["counter_normals"](np.uint64(9), ids, 4), rtol=1e-15, atol=1e-15)
    rng = np.random.default_rng(2)
    fields = rng.standard_normal((3, 101))
    q = rng.uniform(-1, 11, 777)
    np.testing.assert_allclose(K._cubic_interp_nb(0.0, 0.1, fields, q),
                               K.numpy_kernels["cubic_interp"](0.0, 0.1, fields, q), rtol=0, atol=1e-14)
    s = rng.standard_normal(3000)
    np.testing.assert_allclose(K._linear_bin_nb(s, -6.0, 0.01, 1201),
                               K.numpy_kernels["linear_bin"](s, -6.0, 0.01, 1201), rtol=0, atol=1e-12)


SNIPPET = """
import numpy as np
from fbsde_gauss import backend_name
from fbsde_gauss.sde import DrivingCoefficients, simulate_paths
dc = DrivingCoefficients.from_exprs("-x", "1 + 0.1*tanh(x)", 1.0)
ps = simulate_paths(dc, 0.0, 3000, 40, 5)
print(backend_name())
print(repr(float(np.sum(ps.X[1.0]))))
"""


def test_env_flag_selects_numpy_backend_with_same_numbers():
    outs = {}
    for flag in ("0", "1"):
        env = dict(os.environ, FBSDE_GAUSS_DISABLE_NUMBA=flag)
        r = subprocess.run([sys.executable, "-c", SNIPPET], env=env, capture_output=True,
                           text=True, check=True)
        outs[flag] = r.stdout.split()
    assert outs["1"][0] == "numpy"
    if K.USE_NUMBA:
        assert outs["0"][0] == "numba"
    assert float(outs["0"][1]) == pytest.approx(float(outs["1"][1]), rel=1e-12)
