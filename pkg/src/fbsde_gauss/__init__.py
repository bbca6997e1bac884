"""Numerical Gaussian density envelopes for one-dimensional fully coupled FBSDEs.

The pipeline parses the coefficients ``f, sigma, g, h``, checks the structural
assumptions on a sampled box, solves the associated quasilinear PDE, simulates
the decoupled forward SDE with pathwise Malliavin derivatives and compares the
laws of ``X_t, Y_t, Z_t`` with their Gaussian envelopes.
"""

__version__ = "0.1.0"

from ._kernels import USE_NUMBA, backend_name  # noqa: E402
from .coeffs import CoefficientSet, parse_expr  # noqa: E402

__all__ = ["__version__", "USE_NUMBA", "backend_name", "CoefficientSet", "parse_expr"]
