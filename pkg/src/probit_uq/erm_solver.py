"""Direct minimisation of the ridge-penalised logistic risk.

Objective (see the package README for the scaling convention)::

    L(w) = sum_mu log(1 + exp(-y_mu w.x_mu)) + lam/2 ||w||^2

``risk_value`` and ``final_grad_norm`` are reported for ``L(w) / n``, so the
risk at ``w = 0`` is exactly ``log 2``.
"""

from dataclasses import dataclass, asdict
import logging

import numpy as np
from scipy import linalg, optimize

from .links import logistic_loss, sigmoid
from .probit_model import Dataset, sample_test

log = logging.getLogger(__name__)

NEWTON_MAX_DIM = 2000


@dataclass
class ErmSolution:
    w_hat: np.ndarray
    final_grad_norm: float
    risk_value: float
    iterations: int
    status: str = "converged"          # converged | max-iter | diverging-margin
    risk_trace: tuple = ()

    def to_dict(self):
        out = asdict(self)
        out["w_hat"] = self.w_hat.tolist()
        out["risk_trace"] = list(self.risk_trace)
        return out


def _objective(w, Z, lam):
    margins = Z @ w
    return float(np.sum(logistic_loss(margins)) + 0.5 * lam * (w @ w)), margins


def minimize(data: Dataset, lam: float, grad_tol: float = 1e-10, max_iter: int = 200,
             norm_cap: float = 1e4, method: str = "auto") -> ErmSolution:
    """Minimise the logistic risk by damped Newton (Cholesky) with Armijo backtracking.

    For d above ``NEWTON_MAX_DIM`` (or ``method="lbfgs"``) L-BFGS is used
    instead.  With ``lam = 0`` on separable data the iterate norm grows without
    bound; once it passes ``norm_cap`` the best iterate is returned with
    status ``"diverging-margin"``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    Z = data.y[:, None] * data.X
    n, d = Z.shape
    if method == "auto":
        method = "newton" if d <= NEWTON_MAX_DIM else "lbfgs"
    if method == "lbfgs":
        return _minimize_lbfgs(Z, lam, grad_tol, max_iter, norm_cap)
    if method != "newton":
        raise ValueError(f"unknown method {method!r}")

    w = np.zeros(d)
    f, margins = _objective(w, Z, lam)
    trace = [f / n]
    status = "max-iter"
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        s = sigmoid(-margins)                       # -dl/dmargin
        grad = -Z.T @ s + lam * w
        gnorm = float(np.linalg.norm(grad) / n)
        if gnorm <= grad_tol:
            status = "converged"
            it -= 1
            break
        curv = s * (1.0 - s)
        H = (Z.T * curv) @ Z
        H[np.diag_indices_from(H)] += lam + 1e-12 * n
        try:
            step = -linalg.cho_solve(linalg.cho_factor(H, lower=True), grad)
        except linalg.LinAlgError:
            step = -grad / (lam + 1.0)
        slope = float(grad @ step)
        t = 1.0
        while True:
            w_try = w + t * step
            f_try, m_try = _objective(w_try, Z, lam)
            if f_try <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if f_try > f:
            # no decrease possible at machine precision
            status = "converged" if gnorm < 1e3 * grad_tol else "stalled"
            break
        w, f, margins = w_try, f_try, m_try
        trace.append(f / n)
        if lam == 0 and np.linalg.norm(w) > norm_cap:
            status = "diverging-margin"
            log.warning("logistic iterate norm exceeded %g at lambda=0: data separable", norm_cap)
            break
    status = _separable_flag(lam, margins, status)
    s = sigmoid(-margins)
    gnorm = float(np.linalg.norm(-Z.T @ s + lam * w) / n)
    return ErmSolution(w, gnorm, f / n, it, status, tuple(trace))


def _separable_flag(lam, margins, status):
    # all margins positive at lam = 0: scaling w up always lowers the risk, so
    # a small gradient here is underflow, not a minimum
    if lam == 0 and status != "diverging-margin" and np.all(margins > 0):
        log.warning("training set separated at lambda=0: iterate norm diverges")
        return "diverging-margin"
    return status


def _minimize_lbfgs(Z, lam, grad_tol, max_iter, norm_cap):
    n, d = Z.shape
    trace = []

    def fun(w):
        f, margins = _objective(w, Z, lam)
        g = -Z.T @ sigmoid(-margins) + lam * w
        return f / n, g / n

    last = {"w": np.zeros(d)}

    def cb(w):
        last["w"] = w.copy()
        trace.append(fun(w)[0])
        if lam == 0 and np.linalg.norm(w) > norm_cap:
            raise StopIteration

    trace.append(fun(last["w"])[0])
    status = "converged"
    try:
        res = optimize.minimize(fun, last["w"], jac=True, method="L-BFGS-B", callback=cb,
                                options={"gtol": grad_tol, "maxiter": 50 * max_iter,
                                         "ftol": 0.0, "maxcor": 30})
        w, nit = res.x, res.nit
    except StopIteration:
        status = "diverging-margin"
        w, nit = last["w"], len(trace) - 1
    f, g = fun(w)
    gnorm = float(np.linalg.norm(g))
    if status == "converged" and gnorm > grad_tol:
        status = "max-iter"
    status = _separable_flag(lam, Z @ w, status)
    return ErmSolution(w, gnorm, f, nit, status, tuple(trace))


def erm_confidence(x, w_hat):
    """Logistic confidence sigmoid(w.x)."""
    return sigmoid(np.asarray(x, dtype=float) @ np.asarray(w_hat, dtype=float))


def overlaps(w_hat, w_star):
    """Empirical (m, q_erm) = (w.w_star/d, ||w||^2/d)."""
    d = len(w_star)
    return float(w_hat @ w_star / d), float(w_hat @ w_hat / d)


def closed_form_error(m: float, q: float, tau: float) -> float:
    """arccos(m / sqrt(q (1 + tau^2))) / pi, the error implied by overlaps."""
    if q <= 0:
        return 0.5
    return float(np.arccos(np.clip(m / np.sqrt(q * (1.0 + tau ** 2)), -1, 1)) / np.pi)


def test_metrics(w_hat, w_star, tau: float, n_test: int = 100_000, seed: int = 0,
                 batch: int = 100_000):
    """Monte-Carlo test 0/1 error and mean logistic loss on fresh probit data.

    Returns ``(error, loss, closed_form)`` where ``closed_form`` is the
    overlap-based error evaluated with the empirical m and q of ``w_hat``
    against the realised teacher.
    """
    w_hat = np.asarray(w_hat, float)
    wrong = 0.0
    loss = 0.0
    done = k = 0
    while done < n_test:
        size = min(batch, n_test - done)
        X, y = sample_test(w_star, tau, size, seed + k)
        margin = y * (X @ w_hat)
        wrong += np.sum(margin < 0) + 0.5 * np.sum(margin == 0)
        loss += np.sum(logistic_loss(margin))
        done += size
        k += 1
    # closed form uses the teacher's realised norm (rho = ||w_star||^2 / d)
    d = len(w_star)
    rho = float(w_star @ w_star / d)
    m, q = overlaps(w_hat, w_star)
    cf = 0.5 if q == 0 else float(
        np.arccos(np.clip(m / np.sqrt(q * (rho + tau ** 2)), -1, 1)) / np.pi)
    return float(wrong / n_test), float(loss / n_test), cf
