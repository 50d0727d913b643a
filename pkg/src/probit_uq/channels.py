"""Scalar channel denoisers ``f_out`` and the logistic proximal operator.

All functions broadcast over numpy arrays.  A channel maps
``(y, omega, V) -> (f_out, d f_out / d omega)``.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .links import probit_mills, sigmoid

PROX_TOL = 1e-12


def prox_logistic(y, omega, V, tol=PROX_TOL, max_iter=200):
    """argmin_z (z - omega)^2 / (2V) + log(1 + exp(-y z)).

    Solved on the margin ``u = y z``: ``u = y omega + V sigmoid(-u)`` has a
    unique root in ``[y omega, y omega + V]``.  A Newton step is replaced by
    bisection of the current bracket when it leaves the bracket or fails to
    halve the residual (Newton alone can 2-cycle here for large V).
    """
    y, omega, V = np.broadcast_arrays(np.asarray(y, float), np.asarray(omega, float),
                                      np.asarray(V, float))
    if np.any(V <= 0):
        raise ValueError("prox variance V must be positive")
    a = y * omega
    lo = a.copy()
    hi = a + V
    u = a + V * sigmoid(-a)          # one fixed-point step, inside the bracket
    prev = np.full(a.shape, np.inf)
    for _ in range(max_iter):
        s = sigmoid(-u)
        res = u - a - V * s
        ares = np.abs(res)
        if np.all((ares <= tol * np.maximum(1.0, np.abs(u))) | (hi - lo <= tol)):
            break
        lo = np.where(res < 0, u, lo)
        hi = np.where(res > 0, u, hi)
        u_new = u - res / (1.0 + V * s * (1.0 - s))
        bisect = (u_new <= lo) | (u_new >= hi) | (ares > 0.5 * prev)
        u = np.where(bisect, 0.5 * (lo + hi), u_new)
        prev = ares
    out = y * u
    return out[()] if out.ndim == 0 else out


def logistic_curvature(z):
    """Second derivative of log(1+e^{-yz}) in z (independent of y = +-1)."""
    s = sigmoid(z)
    return s * (1.0 - s)


def f_out_erm(y, omega, V):
    """(prox_{V l(y,.)}(omega) - omega) / V for the logistic loss."""
    return (prox_logistic(y, omega, V) - omega) / V


def erm_channel(y, omega, V):
    """Logistic-loss denoiser and its omega-derivative.

    Uses d prox / d omega = 1 / (1 + V l''(prox)).
    """
    z = prox_logistic(y, omega, V)
    g = (z - omega) / V
    curv = logistic_curvature(z)
    dg = -curv / (1.0 + V * curv)
    return g, dg


def f_out_bayes(y, omega, V, tau):
    """Probit posterior channel 2y N(omega y | 0, V+tau^2) / erfc(-y omega / sqrt(2(V+tau^2)))."""
    delta = np.asarray(V, float) + tau ** 2
    if np.any(delta <= 0):
        raise ValueError("V + tau^2 must be positive")
    sd = np.sqrt(delta)
    y = np.asarray(y, float)
    return y * probit_mills(y * np.asarray(omega, float) / sd) / sd


def bayes_channel(y, omega, V, tau):
    """Probit denoiser g and dg/domega = -g (omega / (V + tau^2) + g)."""
    delta = np.asarray(V, float) + tau ** 2
    g = f_out_bayes(y, omega, V, tau)
    return g, -g * (np.asarray(omega, float) / delta + g)


@dataclass(frozen=True)
class ChannelDenoiser:
    """A named output channel usable by GAMP.

    ``kind`` is ``"bayes-probit"`` or ``"logistic-erm"``; ``penalty`` is the
    Gaussian prior precision used in the marginal update (1 for the Bayes
    prior, lambda for ridge-penalised ERM).
    """

    kind: str
    fn: Callable
    penalty: float

    def __call__(self, y, omega, V):
        return self.fn(y, omega, V)

    def f_out(self, y, omega, V):
        return self.fn(y, omega, V)[0]

    def df_out(self, y, omega, V):
        return self.fn(y, omega, V)[1]


def bayes_probit(tau: float) -> ChannelDenoiser:
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return ChannelDenoiser("bayes-probit", lambda y, w, V: bayes_channel(y, w, V, tau), 1.0)


def logistic_erm(lam: float) -> ChannelDenoiser:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return ChannelDenoiser("logistic-erm", erm_channel, float(lam))
