"""Generalised approximate message passing for the probit GLM.

The same loop serves Bayes-optimal estimation (probit channel, N(0,1) prior)
and ridge-logistic ERM (logistic channel, Gaussian prior of precision lam);
the two differ only in the channel and in the prior precision ``kappa`` used
in the marginal update  w = b / (kappa + A),  c = 1 / (kappa + A).
"""

from dataclasses import dataclass, asdict
import json
import logging

import numpy as np

from .channels import (ChannelDenoiser, bayes_probit, logistic_erm,  # noqa: F401
                       bayes_channel, erm_channel, f_out_bayes, f_out_erm)
from .links import sigma_star
from .probit_model import Dataset, sample_test

log = logging.getLogger(__name__)

FLOOR = 1e-11


@dataclass
class GampState:
    w_hat: np.ndarray
    c_hat: np.ndarray
    g: np.ndarray
    omega: np.ndarray
    V: np.ndarray
    iteration: int = 0


@dataclass
class GampResult:
    w_hat: np.ndarray
    c_hat: np.ndarray
    converged: bool
    iterations_used: int
    final_delta: float
    channel: str = ""
    clamped: int = 0
    damping: float = 0.0

    def to_dict(self):
        out = asdict(self)
        out["w_hat"] = self.w_hat.tolist()
        out["c_hat"] = self.c_hat.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["w_hat"] = np.asarray(d["w_hat"], dtype=float)
        d["c_hat"] = np.asarray(d["c_hat"], dtype=float)
        return cls(**d)


def run_gamp(data: Dataset, channel: ChannelDenoiser, prior_lambda=None, max_iter=1000,
             tol=1e-6, damping=0.2, seed=0, adaptive=True, callback=None) -> GampResult:
    """Iterate GAMP on ``data`` until max|w^{t+1} - w^t| <= tol.

    ``prior_lambda`` overrides the channel's prior precision (1 for Bayes,
    lam for ERM).  ``seed`` drives the random initial mean.  With
    ``adaptive`` the damping is raised to 0.5 when the step size grows.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0 <= damping < 1:
        raise ValueError("damping must lie in [0, 1)")
    kappa = channel.penalty if prior_lambda is None else float(prior_lambda)
    X, y = data.X, data.y
    X2 = X * X
    n, d = X.shape
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(d)
    c = np.ones(d)
    g = np.zeros(n)
    clamped = 0
    delta = np.inf
    first_delta = None
    prev_delta = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        V = X2 @ c
        if np.any(V < FLOOR):
            clamped += int(np.sum(V < FLOOR))
            V = np.maximum(V, FLOOR)
        omega = X @ w - V * g
        g, dg = channel(y, omega, V)
        A = -(X2.T @ dg)
        b = X.T @ g + A * w
        prec = kappa + A
        if np.any(prec < FLOOR):
            clamped += int(np.sum(prec < FLOOR))
            prec = np.maximum(prec, FLOOR)
        w_new = b / prec
        c_new = 1.0 / prec
        w_new = (1 - damping) * w_new + damping * w
        c_new = (1 - damping) * c_new + damping * c
        delta = float(np.max(np.abs(w_new - w)))
        w, c = w_new, np.maximum(c_new, FLOOR)
        if callback is not None:
            callback(GampState(w, c, g, omega, V, it))
        if not np.isfinite(delta):
            break
        if first_delta is None:
            first_delta = delta
        if delta <= tol:
            converged = True
            break
        if delta > 10 * first_delta and it > 5:
            log.warning("GAMP diverging at iteration %d (delta=%g)", it, delta)
            break
        if adaptive and delta > prev_delta and damping < 0.5:
            damping = 0.5
        prev_delta = delta
    if clamped:
        log.info("GAMP clamped %d variance entries to %g", clamped, FLOOR)
    return GampResult(w, c, converged, it, delta, channel.kind, clamped, damping)


def predict_bayes(x, result: GampResult, tau: float):
    """Bayes predictor sigma_star(w.x / sqrt(tau^2 + c.(x*x))) for one or many x."""
    x = np.asarray(x, dtype=float)
    mean = x @ result.w_hat
    var = (x * x) @ result.c_hat + tau ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(var > 0, sigma_star(mean / np.sqrt(np.where(var > 0, var, 1.0))),
                       sigma_star(mean, 0.0))
    return out[()] if np.ndim(out) == 0 else out


def bayes_test_error(result: GampResult, w_star, tau: float, n_test: int = 100_000,
                     seed: int = 0, batch: int = 100_000) -> float:
    """Monte-Carlo 0/1 error of thresholding predict_bayes at 1/2."""
    wrong = 0
    done = 0
    k = 0
    while done < n_test:
        m = min(batch, n_test - done)
        X, y = sample_test(w_star, tau, m, seed + k)
        p = predict_bayes(X, result, tau)
        pred = np.where(p > 0.5, 1.0, np.where(p < 0.5, -1.0, 0.0))
        # ties (p exactly 1/2) count as half an error
        wrong += np.sum(pred == -y) + 0.5 * np.sum(pred == 0)
        done += m
        k += 1
    return float(wrong / n_test)
