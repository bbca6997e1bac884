"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``FBSDE_GAUSS_DISABLE_NUMBA=1`` before import to force the numpy path.
Both paths compute the same quantities; the counter-based normal generator
and the Thomas solve agree bit-for-bit, the interpolation and binning
kernels agree to rounding.
"""

import os

import numpy as np

__all__ = [
    "USE_NUMBA",
    "backend_name",
    "thomas_solve",
    "counter_normals",
    "cubic_interp",
    "linear_bin",
    "numpy_kernels",
]


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = not _env_flag("FBSDE_GAUSS_DISABLE_NUMBA")
if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO53 = 1.0 / 9007199254740992.0


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _thomas_np(lower, diag, upper, rhs):
    n = diag.shape[0]
    cp = np.empty(n)
    dp = np.empty(n)
    cp[0] = upper[0] / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / denom
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / denom
    x = np.empty(n)
    x[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


def _splitmix_np(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def _normals_np(seed, path_ids, step):
    with np.errstate(over="ignore"):
        base = _splitmix_np(np.full(path_ids.shape, seed, dtype=np.uint64))
        a = _splitmix_np(base ^ path_ids.astype(np.uint64))
        lane = np.uint64(2) * np.uint64(step)
        h1 = _splitmix_np(a ^ lane)
        h2 = _splitmix_np(a ^ (lane + np.uint64(1)))
    u1 = ((h1 >> _S11).astype(np.float64) + 0.5) * _TWO53
    u2 = (h2 >> _S11).astype(np.float64) * _TWO53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _stencil_np(x_lo, dx, n_nodes, xq):
    s = (xq - x_lo) / dx
    j0 = np.floor(s).astype(np.int64) - 1
    j0 = np.clip(j0, 0, n_nodes - 4)
    s = np.clip(s, 0.0, n_nodes - 1.0) - j0
    # Lagrange weights on nodes j0..j0+3 at local coordinate s in [0, 3]
    w0 = -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0
    w1 = s * (s - 2.0) * (s - 3.0) / 2.0
    w2 = -s * (s - 1.0) * (s - 3.0) / 2.0
    w3 = s * (s - 1.0) * (s - 2.0) / 6.0
    return j0, (w0, w1, w2, w3)


def _cubic_interp_np(x_lo, dx, fields, xq):
    n_nodes = fields.shape[1]
    j0, w = _stencil_np(x_lo, dx, n_nodes, xq)
    out = np.empty((fields.shape[0], xq.shape[0]))
    for f in range(fields.shape[0]):
        row = fields[f]
        out[f] = (w[0] * row[j0] + w[1] * row[j0 + 1]
                  + w[2] * row[j0 + 2] + w[3] * row[j0 + 3])
    return out


def _linear_bin_np(samples, lo, delta, n_bins):
    s = (samples - lo) / delta
    inside = (s >= 0.0) & (s <= n_bins - 1.0)
    s = s[inside]
    j = np.minimum(np.floor(s).astype(np.int64), n_bins - 2)
    w = s - j
    counts = np.bincount(j, weights=1.0 - w, minlength=n_bins)
    counts += np.bincount(j + 1, weights=w, minlength=n_bins)
    return counts[:n_bins]


numpy_kernels = {
    "thomas_solve": _thomas_np,
    "counter_normals": _normals_np,
    "cubic_interp": _cubic_interp_np,
    "linear_bin": _linear_bin_np,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if USE_NUMBA:
    _thomas_nb = numba.njit(cache=True, nogil=True)(_thomas_np)

    @numba.njit(cache=True, nogil=True, inline="always")
    def _splitmix_nb(z):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    @numba.njit(cache=True, nogil=True)
    def _normals_nb(seed, path_ids, step):
        n = path_ids.shape[0]
        out = np.empty(n)
        base = _splitmix_nb(np.uint64(seed))
        lane = np.uint64(2) * np.uint64(step)
        two_pi = 2.0 * np.pi
        for i in range(n):
            a = _splitmix_nb(base ^ np.uint64(path_ids[i]))
            h1 = _splitmix_nb(a ^ lane)
            h2 = _splitmix_nb(a ^ (lane + np.uint64(1)))
            u1 = (np.float64(h1 >> np.uint64(11)) + 0.5) * _TWO53
            u2 = np.float64(h2 >> np.uint64(11)) * _TWO53
            out[i] = np.sqrt(-2.0 * np.log(u1)) * np.cos(two_pi * u2)
        return out

    @numba.njit(cache=True, nogil=True)
    def _cubic_interp_nb(x_lo, dx, fields, xq):
        n_fields, n_nodes = fields.shape
        m = xq.shape[0]
        out = np.empty((n_fields, m))
        for i in range(m):
            s = (xq[i] - x_lo) / dx
            j0 = int(np.floor(s)) - 1
            if j0 < 0:
                j0 = 0
            elif j0 > n_nodes - 4:
                j0 = n_nodes - 4
            if s < 0.0:
                s = 0.0
            elif s > n_nodes - 1.0:
                s = n_nodes - 1.0
            s = s - j0
            w0 = -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0
            w1 = s * (s - 2.0) * (s - 3.0) / 2.0
            w2 = -s * (s - 1.0) * (s - 3.0) / 2.0
            w3 = s * (s - 1.0) * (s - 2.0) / 6.0
            for f in range(n_fields):
                out[f, i] = (w0 * fields[f, j0] + w1 * fields[f, j0 + 1]
                             + w2 * fields[f, j0 + 2] + w3 * fields[f, j0 + 3])
        return out

    @numba.njit(cache=True, nogil=True)
    def _linear_bin_nb(samples, lo, delta, n_bins):
        counts = np.zeros(n_bins)
        for i in range(samples.shape[0]):
            s = (samples[i] - lo) / delta
            if s < 0.0 or s > n_bins - 1.0:
                continue
            j = int(np.floor(s))
            if j > n_bins - 2:
                j = n_bins - 2
            w = s - j
            counts[j] += 1.0 - w
            counts[j + 1] += w
        return counts


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

def thomas_solve(lower, diag, upper, rhs):
    """Solve a tridiagonal system with the Thomas algorithm.

    ``lower[0]`` and ``upper[-1]`` are ignored. No pivoting; the callers
    only hand in diagonally dominant systems.
    """
    args = (np.ascontiguousarray(lower, dtype=np.float64),
            np.ascontiguousarray(diag, dtype=np.float64),
            np.ascontiguousarray(upper, dtype=np.float64),
            np.ascontiguousarray(rhs, dtype=np.float64))
    if USE_NUMBA:
        return _thomas_nb(*args)
    return _thomas_np(*args)


def counter_normals(seed, path_ids, step):
    """Standard normals keyed by ``(seed, path, step)``.

    The draw for a given key never depends on which other paths are
    generated alongside it, so any path can be replayed in isolation.
    """
    ids = np.ascontiguousarray(path_ids, dtype=np.int64)
    if USE_NUMBA:
        return _normals_nb(np.uint64(seed), ids, np.int64(step))
    return _normals_np(np.uint64(seed), ids, int(step))


def cubic_interp(x_lo, dx, fields, xq):
    """Four-point Lagrange interpolation of stacked nodal ``fields``.

    Parameters
    ----------
    x_lo, dx : float
        Uniform grid origin and spacing.
    fields : ndarray, shape (n_fields, n_nodes)
    xq : ndarray, shape (m,)
        Query points; values outside the grid are clamped to its ends.

    Returns
    -------
    ndarray, shape (n_fields, m)
    """
    fields = np.ascontiguousarray(np.atleast_2d(fields), dtype=np.float64)
    xq = np.ascontiguousarray(xq, dtype=np.float64)
    if USE_NUMBA:
        return _cubic_interp_nb(float(x_lo), float(dx), fields, xq)
    return _cubic_interp_np(float(x_lo), float(dx), fields, xq)


def linear_bin(samples, lo, delta, n_bins):
    """Linear-binning counts of ``samples`` on ``lo + k*delta``, k < n_bins."""
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if USE_NUMBA:
        return _linear_bin_nb(samples, float(lo), float(delta), int(n_bins))
    return _linear_bin_np(samples, float(lo), float(delta), int(n_bins))
