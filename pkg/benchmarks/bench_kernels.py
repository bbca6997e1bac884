"""Time the numba kernels against their pure-numpy fallbacks.

Run ``python benchmarks/bench_kernels.py``; add ``--end-to-end`` to also time a
small simulation in a subprocess per backend (the backend is chosen at import
time from FBSDE_GAUSS_DISABLE_NUMBA).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fbsde_gauss import _kernels as K

E2E = """
import time
from fbsde_gauss.sde import DrivingCoefficients, simulate_paths
dc = DrivingCoefficients.from_exprs("-x", "1 + 0.1*tanh(x)", 1.0)
simulate_paths(dc, 0.0, 2000, 20, 0)
t0 = time.perf_counter()
simulate_paths(dc, 0.0, 20000, 200, 1)
print(time.perf_counter() - t0)
"""


def cases(n):
    rng = np.random.default_rng(0)
    J = 400
    lower = rng.uniform(-1, 0, J)
    upper = rng.uniform(-1, 0, J)
    diag = 3.0 + rng.uniform(0, 1, J)
    rhs = rng.standard_normal(J)
    ids = np.arange(n, dtype=np.int64)
    fields = rng.standard_normal((4, J + 1))
    xq = rng.uniform(-8, 8, n)
    samples = rng.standard_normal(n)
    return {
        "thomas_solve": ((lower, diag, upper, rhs), (lower, diag, upper, rhs)),
        "counter_normals": ((np.uint64(7), ids, np.int64(3)), (np.uint64(7), ids, 3)),
        "cubic_interp": ((-8.0, 16.0 / J, fields, xq), (-8.0, 16.0 / J, fields, xq)),
        "linear_bin": ((samples, -8.0, 16.0 / 4096, 4097), (samples, -8.0, 16.0 / 4096, 4097)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000, help="vector length")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    if not K.USE_NUMBA:
        sys.exit("numba is disabled in this process; unset FBSDE_GAUSS_DISABLE_NUMBA")
    nb = {"thomas_solve": K._thomas_nb, "counter_normals": K._normals_nb,
          "cubic_interp": K._cubic_interp_nb, "linear_bin": K._linear_bin_nb}
    print(f"{'kernel':<16}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}  agree")
    for name, (a_nb, a_np) in cases(args.n).items():
        r_nb = nb[name](*a_nb)  # compile outside the timing
        r_np = K.numpy_kernels[name](*a_np)
        agree = np.array_equal(r_nb, r_np) or np.allclose(r_nb, r_np, rtol=1e-12, atol=1e-12)
        t_nb = min(timeit.repeat(lambda: nb[name](*a_nb), number=10, repeat=args.repeat)) / 10
        t_np = min(timeit.repeat(lambda: K.numpy_kernels[name](*a_np), number=10,
                                 repeat=args.repeat)) / 10
        print(f"{name:<16}{1e3 * t_nb:>12.3f}{1e3 * t_np:>12.3f}{t_np / t_nb:>10.1f}  {agree}")
    if args.end_to_end:
        for label, flag in (("numba", "0"), ("numpy", "1")):
            env = dict(os.environ, FBSDE_GAUSS_DISABLE_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True,
                                 text=True, check=True)
            print(f"simulate 20000 paths x 200 steps [{label}]: {float(out.stdout):.2f} s")


if __name__ == "__main__":
    main()
