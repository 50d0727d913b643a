"""Link functions and their stable inverses / log-derivatives.

Two links appear throughout: the probit ``sigma_star(x) = erfc(-x/sqrt2)/2``
(standard normal CDF) and the logistic ``sigmoid``.  Everything here is
vectorised over numpy arrays.
"""

import numpy as np
from scipy import special

SQRT2 = np.sqrt(2.0)
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

# inverse links are clamped to [P_CLAMP, 1 - P_CLAMP]
P_CLAMP = 1e-12


def sigma_star(x, tau_eff=1.0):
    """Probit link evaluated at ``x / tau_eff``.

    ``tau_eff = 0`` gives the hard step (1 for x>0, 0 for x<0, 0.5 at 0).
    """
    x = np.asarray(x, dtype=float)
    if tau_eff < 0:
        raise ValueError("tau_eff must be non-negative")
    if tau_eff == 0:
        out = 0.5 * (1.0 + np.sign(x))
    else:
        out = 0.5 * special.erfc(-(x / tau_eff) / SQRT2)
    return out[()] if out.ndim == 0 else out


def log_sigma_star(x):
    return special.log_ndtr(x)


def sigma_star_prime(x):
    """Standard normal density."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - LOG_SQRT_2PI)


def log_sigma_star_prime(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - LOG_SQRT_2PI


def sigma_star_inv(p, tol=1e-12, max_iter=50):
    """Inverse of the probit link by bracketed Newton on ``erfc``.

    The start point is ``ndtri``; Newton steps are taken on the residual
    ``sigma_star(x) - p`` and rejected in favour of bisection whenever they
    leave the current bracket.  Converges to ``tol`` in the argument.
    """
    p = np.clip(np.asarray(p, dtype=float), P_CLAMP, 1.0 - P_CLAMP)
    x = special.ndtri(p)
    lo = np.full_like(p, -8.0)
    hi = np.full_like(p, 8.0)
    # the clamped p range maps inside [-7.1, 7.1]
    lo = np.minimum(lo, x - 1.0)
    hi = np.maximum(hi, x + 1.0)
    for _ in range(max_iter):
        # residual in the tail-appropriate form avoids cancellation near p=1
        upper = p > 0.5
        f = np.where(upper, 0.5 * special.erfc(x / SQRT2) - (1.0 - p),
                     0.5 * special.erfc(-x / SQRT2) - p)
        f = np.where(upper, -f, f)
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        dens = sigma_star_prime(x)
        step = np.where(dens > 0, f / np.maximum(dens, 1e-300), 0.0)
        x_new = x - step
        outside = (x_new <= lo) | (x_new >= hi)
        x_new = np.where(outside, 0.5 * (lo + hi), x_new)
        done = np.abs(x_new - x) <= tol
        x = x_new
        if np.all(done):
            break
    return x[()] if x.ndim == 0 else x


def sigmoid(x):
    return special.expit(x)


def log_sigmoid(x):
    """log(1/(1+e^{-x})) without overflow."""
    x = np.asarray(x, dtype=float)
    return -np.logaddexp(0.0, -x)


def logit(p):
    p = np.clip(np.asarray(p, dtype=float), P_CLAMP, 1.0 - P_CLAMP)
    return special.logit(p)


def log_sigmoid_prime(x):
    """log of sigmoid'(x) = sigmoid(x) sigmoid(-x)."""
    return log_sigmoid(x) + log_sigmoid(-x)


def logistic_loss(margin):
    """log(1 + e^{-margin})."""
    return np.logaddexp(0.0, -np.asarray(margin, dtype=float))


def probit_mills(r):
    """phi(r) / Phi(r), finite for every real r.

    For r -> -inf the ratio behaves like -r; it is evaluated through
    ``erfcx`` so that neither numerator nor denominator underflows.
    """
    r = np.asarray(r, dtype=float)
    return np.sqrt(2.0 / np.pi) / special.erfcx(-r / SQRT2)
