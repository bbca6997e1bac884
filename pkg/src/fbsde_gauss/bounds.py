"""Closed-form envelope constants and Gaussian density/tail envelopes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

__all__ = [
    "BoundConstants", "EnvelopeParams", "EnvelopeRefused",
    "x_constants", "y_constants", "z_constants",
    "envelope_density", "tail_bound", "write_envelope_csv",
]


class EnvelopeRefused(ValueError):
    """The lower-bound curve needed by an envelope vanishes."""


def _const(v):
    return lambda t: float(v)


@dataclass(frozen=True)
class BoundConstants:
    """Inputs of the six envelope constants.

    ``m`` and ``rho`` are callables of *physical* time ``t``; they already
    absorb the reversal of the PDE clock (see
    :meth:`fbsde_gauss.pde.LowerBoundCurves.m`).
    """

    nu: float
    mu: float
    M: float
    M1: float
    M_psi: float
    gamma: float = 0.0
    m: Callable[[float], float] = _const(0.0)
    rho: Callable[[float], float] = _const(0.0)

    def __post_init__(self):
        if self.nu > self.mu:
            raise ValueError("need nu(M) <= mu(M)")
        if self.M_psi < 0:
            raise ValueError("M_psi must be non-negative")

    @classmethod
    def constant(cls, nu, mu, M_psi, M=1.0, M1=1.0, gamma=0.0, m=0.0, rho=0.0):
        return cls(nu=nu, mu=mu, M=M, M1=M1, M_psi=M_psi, gamma=gamma, m=_const(m), rho=_const(rho))

    def with_M_psi(self, value):
        return replace(self, M_psi=float(value))


def _check_t(t):
    if not t > 0:
        raise ValueError("t must be positive")


def x_constants(t, bc: BoundConstants):
    """``(xi, Xi)`` bracketing the Malliavin integral of ``X_t``."""
    _check_t(t)
    e = math.exp(2.0 * bc.M_psi * t)
    return t * bc.nu ** 2 / e, t * bc.mu ** 2 * e


def y_constants(t, bc: BoundConstants):
    _check_t(t)
    m = bc.m(t)
    if not m > 0:
        raise EnvelopeRefused(f"slope lower bound m({t}) = {m} is not positive; "
                              "the Y envelope needs (A5)")
    lam = t * (m * bc.nu * math.exp(-bc.M_psi * t)) ** 2
    Lam = t * (bc.M1 * bc.mu * math.exp(bc.M_psi * t)) ** 2
    return lam, Lam


def z_constants(t, bc: BoundConstants):
    _check_t(t)
    rho = bc.rho(t)
    if not rho > 0:
        raise EnvelopeRefused(f"curvature lower bound rho({t}) = {rho} is not positive; "
                              "the Z envelope needs (A8)")
    e = math.exp(2.0 * bc.M_psi * t)
    return t * bc.nu ** 4 * rho ** 2 / e, t * bc.mu ** 2 * bc.gamma ** 2 * e


@dataclass(frozen=True)
class EnvelopeParams:
    mean: float
    absdev: float
    l: float  # noqa: E741
    L: float

    def __post_init__(self):
        if not 0 < self.l <= self.L:
            raise ValueError(f"need 0 < l <= L, got l={self.l}, L={self.L}")
        if self.absdev < 0:
            raise ValueError("absdev must be non-negative")

    def halved_L(self):
        """Deliberately wrong envelope: ``L`` halved, ``l`` clipped to stay <= L."""
        L = 0.5 * self.L
        return EnvelopeParams(self.mean, self.absdev, min(self.l, L), L)


def envelope_density(x, ep: EnvelopeParams):
    """Lower and upper Gaussian envelopes of the density at ``x``."""
    d2 = (np.asarray(x, dtype=np.float64) - ep.mean) ** 2
    lower = ep.absdev / (2.0 * ep.L) * np.exp(-d2 / (2.0 * ep.l))
    upper = ep.absdev / (2.0 * ep.l) * np.exp(-d2 / (2.0 * ep.L))
    if np.ndim(x) == 0:
        return float(lower), float(upper)
    return lower, upper


def tail_bound(x, mean, L, side="upper"):
    """Bound on ``P(F >= x)`` (``side='upper'``) or ``P(F <= -x)`` (``'lower'``)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("tail bounds hold for x > 0 only")
    if side == "upper":
        out = np.exp(-(x - mean) ** 2 / (2.0 * L))
    elif side == "lower":
        out = np.exp(-(x + mean) ** 2 / (2.0 * L))
    else:
        raise ValueError(f"unknown side {side!r}")
    return float(out) if out.ndim == 0 else out


def write_envelope_csv(path, xs, lower, upper, kde=None, stderr=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["x", "lower", "upper"]
        if kde is not None:
            head += ["kde", "stderr"]
        w.writerow(head)
        for i in range(len(xs)):
            row = [repr(float(xs[i])), repr(float(lower[i])), repr(float(upper[i]))]
            if kde is not None:
                row += [repr(float(kde[i])), repr(float(stderr[i]))]
            w.writerow(row)
