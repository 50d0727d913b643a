"""Asymptotic overlaps of the Bayes-optimal and ridge-logistic estimators.

Conventions
-----------
* Teacher norm ``rho = ||w_star||^2 / d`` is fixed to ``RHO = 1``.
* The logistic objective tracked here is ``sum_mu l(y_mu, w.x_mu) + lam/2 ||w||^2``
  (no 1/n in front of the loss).  This is the scaling under which
  ``V = 1/(lam + V_hat)`` holds and under which GAMP with a ridge prior has
  the ERM minimiser as its fixed point.
* Channel expectations are over ``(z, omega) ~ N(0, [[1, m], [m, q]])`` with the
  label ``y = sign(z + tau xi)``.  Both ``xi`` and ``z`` are integrated out
  analytically given ``omega``:  ``z | omega ~ N(m omega / q, 1 - m^2/q)`` so
  ``P(y | omega) = Phi(y (m/q) omega / sqrt(1 - m^2/q + tau^2))``.  What is
  left is a 1-d Gauss-Hermite sum over ``omega`` plus a two-term label sum,
  which stays exact for ``tau = 0`` where the label weight is a step in ``z``.
"""

from dataclasses import dataclass, field, asdict, replace
from functools import lru_cache

import numpy as np
from scipy import optimize

from .channels import bayes_channel, erm_channel, prox_logistic  # noqa: F401  (re-export)
from .links import (SQRT2, logistic_loss, sigma_star, sigma_star_prime)
from scipy import special

RHO = 1.0


class SEError(RuntimeError):
    pass


class SEConvergenceError(SEError):
    def __init__(self, msg, last=None, residual=None):
        super().__init__(msg)
        self.last = last
        self.residual = residual


class SeparableRegimeError(SEError):
    """lam = 0 below the separability threshold: the empirical risk has no minimiser."""


@dataclass(frozen=True)
class SEConfig:
    quadrature_nodes: int = 199
    fp_tol: float = 1e-9
    fp_max_iter: int = 5000
    fp_damping: float = 0.5

    def __post_init__(self):
        if self.quadrature_nodes < 51 or self.quadrature_nodes % 2 == 0:
            raise ValueError("quadrature_nodes must be odd and >= 51")
        if not 0 <= self.fp_damping < 1:
            raise ValueError("fp_damping must lie in [0, 1)")


DEFAULT_CONFIG = SEConfig()


@dataclass(frozen=True)
class Overlaps:
    q_bo: float
    m: float
    q_erm: float
    V_erm: float
    m_hat: float
    q_hat: float
    V_hat: float
    alpha: float = float("nan")
    tau: float = float("nan")
    lam: float = float("nan")
    residual: float = float("nan")
    iterations: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class _State:
    m: float
    q: float
    V: float
    hats: tuple = field(default=(0.0, 0.0, 0.0))


@lru_cache(maxsize=16)
def gauss_hermite(n: int):
    """Nodes/weights for E[f(Z)], Z ~ N(0,1)."""
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / np.sqrt(2.0 * np.pi)


def gaussian_expectation_1d(f, var: float, cfg: SEConfig = DEFAULT_CONFIG, mean: float = 0.0):
    x, w = gauss_hermite(cfg.quadrature_nodes)
    return float(np.sum(w * f(mean + np.sqrt(var) * x)))


def gaussian_expectation_2d(f, m: float, q: float, cfg: SEConfig = DEFAULT_CONFIG):
    """E[f(z, omega)] with (z, omega) ~ N(0, [[1, m], [m, q]]).

    Tensor Gauss-Hermite after Cholesky whitening; when q = m^2 the pair is
    rank one (omega = m z) and a 1-d rule along z is used instead.
    """
    if q < 0:
        raise ValueError("q must be non-negative")
    resid = q - m * m
    tol = 1e-14 * max(1.0, q)
    if resid < -tol:
        raise ValueError(f"covariance [[1, m], [m, q]] is not PSD (q - m^2 = {resid:g})")
    x, w = gauss_hermite(cfg.quadrature_nodes)
    if resid <= tol:
        return float(np.sum(w * f(x, m * x)))
    z = x[:, None]
    omega = m * x[:, None] + np.sqrt(resid) * x[None, :]
    vals = f(np.broadcast_to(z, omega.shape), omega)
    return float(np.einsum("i,j,ij->", w, w, vals))


# ---------------------------------------------------------------------------
# Channel expectations given (m, q, V)


def _label_geometry(m, q, tau):
    """Slope of the probit label weight in omega, and the conditional variance."""
    cond_var = RHO - m * m / q
    delta0 = cond_var + tau ** 2
    if delta0 <= 0:
        raise SEError("1 - m^2/q + tau^2 must be positive")
    return (m / q) / np.sqrt(delta0), delta0


def channel_hats(channel, m, q, V, alpha, tau, cfg=DEFAULT_CONFIG):
    """(m_hat, q_hat, V_hat) for a channel ``(y, omega, V) -> (g, dg)``.

    m_hat = alpha E[d/dz g(y(z), omega)], written as a derivative of the
    label likelihood with respect to the mean of z given omega.
    """
    x, w = gauss_hermite(cfg.quadrature_nodes)
    omega = np.sqrt(q) * x
    kappa, delta0 = _label_geometry(m, q, tau)
    m_hat = q_hat = V_hat = 0.0
    for y in (1.0, -1.0):
        g, dg = channel(y, omega, V)
        weight = sigma_star(y * kappa * omega)
        dweight = y * sigma_star_prime(kappa * omega) / np.sqrt(delta0)
        m_hat += np.sum(w * g * dweight)
        q_hat += np.sum(w * weight * g * g)
        V_hat -= np.sum(w * weight * dg)
    return alpha * m_hat, alpha * q_hat, alpha * V_hat


# ---------------------------------------------------------------------------
# Bayes-optimal


def bo_q_hat(q, alpha, tau, cfg=DEFAULT_CONFIG):
    """Reduced Bayes conjugate

    q_hat = (2/pi) alpha / (1 + tau^2 - q)
            * E_{s ~ N(0, q / (2(1 + tau^2 - q)))} exp(-2 s^2) / (erfc(s) erfc(-s)).
    """
    delta = RHO + tau ** 2 - q
    if q <= 0:
        return 0.0
    x, w = gauss_hermite(cfg.quadrature_nodes)
    s = np.sqrt(q / (2.0 * delta)) * x
    a = np.abs(s)
    # exp(-2 s^2)/(erfc(a) erfc(-a)) with erfc(a) = erfcx(a) exp(-a^2)
    ratio = np.exp(-a * a) / (special.erfcx(a) * special.erfc(-a))
    return float(2.0 / np.pi * alpha / delta * np.sum(w * ratio))


def solve_bo(alpha: float, tau: float, cfg: SEConfig = DEFAULT_CONFIG, q0: float = 0.5) -> float:
    """Bayes-optimal overlap q_bo: fixed point of q = q_hat / (1 + q_hat)."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if alpha == 0:
        return 0.0
    return _solve_bo_cached(float(alpha), float(tau), cfg, float(q0))


@lru_cache(maxsize=512)
def _solve_bo_cached(alpha, tau, cfg, q0):
    q = q0
    eta = cfg.fp_damping
    for _ in range(cfg.fp_max_iter):
        qh = bo_q_hat(q, alpha, tau, cfg)
        q_new = (1 - eta) * qh / (1.0 + qh) + eta * q
        if abs(q_new - q) <= cfg.fp_tol:
            return q_new
        q = q_new
    raise SEConvergenceError(f"solve_bo did not converge (alpha={alpha}, tau={tau})", last=q,
                             residual=abs(q_new - q))


def bo_unreduced_residual(q, alpha, tau, cfg=DEFAULT_CONFIG):
    """Residuals of the full (m, q, V) Bayes system evaluated at m = q, V = 1 - q.

    Uses the generic channel expectations with the probit denoiser and the
    Gaussian-prior updates V = 1/(1+V_hat), q = (m_hat^2 + q_hat)/(1+V_hat)^2,
    m = m_hat/(1+V_hat).
    """
    V = RHO - q
    ch = lambda y, om, v: bayes_channel(y, om, v, tau)  # noqa: E731
    mh, qh, vh = channel_hats(ch, q, q, V, alpha, tau, cfg)
    res = np.array([
        1.0 / (1.0 + vh) - V,
        (mh * mh + qh) / (1.0 + vh) ** 2 - q,
        mh / (1.0 + vh) - q,
    ])
    return res, (mh, qh, vh)


def bayes_error(q_bo: float, tau: float) -> float:
    return float(np.arccos(np.sqrt(q_bo / (RHO + tau ** 2))) / np.pi)


# ---------------------------------------------------------------------------
# Ridge-penalised logistic regression


def erm_error(m: float, q_erm: float, tau: float) -> float:
    """Test 0/1 error arccos(m / sqrt(q (rho + tau^2))) / pi."""
    c = np.clip(m / np.sqrt(q_erm * (RHO + tau ** 2)), -1.0, 1.0)
    return float(np.arccos(c) / np.pi)


def erm_loss(m: float, q_erm: float, tau: float, cfg: SEConfig = DEFAULT_CONFIG) -> float:
    """Expected test logistic loss E[log(1 + exp(-y omega))], omega ~ N(0, q_erm)."""
    x, w = gauss_hermite(cfg.quadrature_nodes)
    omega = np.sqrt(q_erm) * x
    kappa, _ = _label_geometry(m, q_erm, tau)
    p_plus = sigma_star(kappa * omega)
    vals = p_plus * logistic_loss(omega) + (1.0 - p_plus) * logistic_loss(-omega)
    return float(np.sum(w * vals))


def erm_loss_2d(m: float, q_erm: float, tau: float, cfg: SEConfig = DEFAULT_CONFIG) -> float:
    """Same expectation as :func:`erm_loss` via 2-d quadrature over (z, omega)."""
    if tau <= 0:
        raise ValueError("2-d label weighting needs tau > 0")

    def f(z, om):
        p = sigma_star(z, tau)
        return p * logistic_loss(om) + (1.0 - p) * logistic_loss(-om)

    return gaussian_expectation_2d(f, m, q_erm, cfg)


def _t_objective(t, tau, cfg):
    # E[(Z - t Y V)_+^2] over V ~ N(0,1), Y = sign(V + tau xi), Z ~ N(0,1)
    x, w = gauss_hermite(cfg.quadrature_nodes)

    def psi(a):
        return (1.0 + a * a) * sigma_star(-a) - a * sigma_star_prime(a)

    if tau == 0:
        return float(np.sum(w * psi(t * np.abs(x))))
    p = sigma_star(x, tau)
    return float(np.sum(w * (p * psi(t * x) + (1 - p) * psi(-t * x))))


def alpha_separability(tau: float, cfg: SEConfig = DEFAULT_CONFIG) -> float:
    """Sample ratio below which the training set is linearly separable w.h.p.

    1/alpha_c = min_t E[(Z - t Y V)_+^2]; infinite for noiseless labels.
    """
    if tau == 0:
        return float("inf")
    res = optimize.minimize_scalar(lambda t: _t_objective(t, tau, cfg),
                                   bounds=(0.0, 50.0), method="bounded",
                                   options={"xatol": 1e-10})
    return float(1.0 / res.fun)


def _erm_update(state, alpha, tau, lam, cfg):
    mh, qh, vh = channel_hats(erm_channel, state.m, state.q, state.V, alpha, tau, cfg)
    denom = lam + vh
    return _State(m=mh / denom, q=(mh * mh + qh) / denom ** 2, V=1.0 / denom, hats=(mh, qh, vh))


def erm_residual(ov: Overlaps, cfg: SEConfig = DEFAULT_CONFIG) -> float:
    """Max abs residual of the six coupled ERM equations at ``ov``."""
    st = _State(ov.m, ov.q_erm, ov.V_erm)
    mh, qh, vh = channel_hats(erm_channel, st.m, st.q, st.V, ov.alpha, ov.tau, cfg)
    denom = ov.lam + ov.V_hat
    res = [
        mh - ov.m_hat, qh - ov.q_hat, vh - ov.V_hat,
        ov.V_erm - 1.0 / denom,
        ov.q_erm - (ov.m_hat ** 2 + ov.q_hat) / denom ** 2,
        ov.m - ov.m_hat / denom,
    ]
    return float(np.max(np.abs(res)))


def solve_erm(alpha: float, tau: float, lam: float, cfg: SEConfig = DEFAULT_CONFIG,
              init=None) -> Overlaps:
    """Damped Picard iteration of the ridge-logistic fixed-point equations.

    ``init`` is an optional ``(m, q, V)`` warm start.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        a_c = alpha_separability(tau, cfg)
        if alpha <= a_c:
            raise SeparableRegimeError(
                f"lambda=0 with alpha={alpha} <= alpha_c={a_c:.4f}: data separable, "
                "the empirical risk has no minimum")
    state = _State(*(init if init is not None else (0.1, 0.5, 1.0)))
    eta = cfg.fp_damping
    diff = np.inf
    checkpoint = np.inf
    for it in range(1, cfg.fp_max_iter + 1):
        new = _erm_update(state, alpha, tau, lam, cfg)
        mixed = _State(m=(1 - eta) * new.m + eta * state.m,
                       q=(1 - eta) * new.q + eta * state.q,
                       V=(1 - eta) * new.V + eta * state.V, hats=new.hats)
        step = max(abs(new.m - state.m), abs(new.q - state.q), abs(new.V - state.V))
        diff = (1 - eta) * step
        if not np.isfinite(diff):
            break
        state = mixed
        # step is the undamped overlap residual
        if step <= cfg.fp_tol:
            break
        # slow or cycling progress: damp harder
        if it % 100 == 0:
            if step > 0.1 * checkpoint and eta < 0.95:
                eta = min(0.95, 0.5 * (1.0 + eta))
            checkpoint = step
    else:
        raise SEConvergenceError(
            f"solve_erm did not converge (alpha={alpha}, tau={tau}, lambda={lam})",
            last=(state.m, state.q, state.V), residual=diff)
    if not np.isfinite(diff):
        raise SEConvergenceError("solve_erm diverged", last=(state.m, state.q, state.V),
                                 residual=diff)
    # final undamped hats at the converged point
    mh, qh, vh = channel_hats(erm_channel, state.m, state.q, state.V, alpha, tau, cfg)
    ov = Overlaps(q_bo=solve_bo(alpha, tau, cfg), m=state.m, q_erm=state.q, V_erm=state.V,
                  m_hat=mh, q_hat=qh, V_hat=vh, alpha=float(alpha), tau=float(tau),
                  lam=float(lam), iterations=it)
    return replace(ov, residual=erm_residual(ov, cfg))


def sigma_matrix(q_bo: float, m: float, q_erm: float) -> np.ndarray:
    """Covariance of (teacher, Bayes, ERM) pre-activations."""
    return np.array([[RHO, q_bo, m], [q_bo, q_bo, m], [m, m, q_erm]], dtype=float)


def derived_metrics(ov: Overlaps, cfg: SEConfig = DEFAULT_CONFIG) -> dict:
    out = {"bayes_error": bayes_error(ov.q_bo, ov.tau)}
    if np.isfinite(ov.m):
        out["erm_error"] = erm_error(ov.m, ov.q_erm, ov.tau)
        out["erm_loss"] = erm_loss(ov.m, ov.q_erm, ov.tau, cfg)
        out["sigma"] = sigma_matrix(ov.q_bo, ov.m, ov.q_erm).tolist()
    return out


__all__ = [
    "SEConfig", "Overlaps", "SEError", "SEConvergenceError", "SeparableRegimeError",
    "prox_logistic", "solve_bo", "solve_erm", "gaussian_expectation_1d",
    "gaussian_expectation_2d", "channel_hats", "bo_q_hat", "bo_unreduced_residual",
    "bayes_error", "erm_error", "erm_loss", "erm_loss_2d", "alpha_separability",
    "sigma_matrix", "derived_metrics", "erm_residual", "RHO", "SQRT2",
]
