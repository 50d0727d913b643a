"""Choosing the ridge strength: asymptotic sweeps and a holdout variant.

``lambda_error`` minimises the 0/1 test error and ``lambda_loss`` the
expected logistic test loss.  Both are located on a log grid and refined by
golden-section search in log(lambda).
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from . import erm_solver as erm_mod
from .probit_model import Dataset, oracle_confidence
from .state_evolution import (DEFAULT_CONFIG, SEConfig, SEError, erm_error, erm_loss,
                              solve_erm)
from .uncertainty import calibration_erm

log = logging.getLogger(__name__)

DEFAULT_GRID = np.geomspace(1e-4, 10.0, 40)
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class LambdaSweep:
    lambdas: np.ndarray
    errors: np.ndarray
    losses: np.ndarray
    calibrations: np.ndarray          # (len(lambdas), len(p_levels))
    lambda_error: float
    lambda_loss: float
    error_at_lambda_error: float = float("nan")
    loss_at_lambda_loss: float = float("nan")
    error_at_lambda_loss: float = float("nan")
    p_levels: tuple = ()
    failed: tuple = ()
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "lambdas": self.lambdas.tolist(), "errors": self.errors.tolist(),
            "losses": self.losses.tolist(), "calibrations": self.calibrations.tolist(),
            "lambda_error": self.lambda_error, "lambda_loss": self.lambda_loss,
            "error_at_lambda_error": self.error_at_lambda_error,
            "loss_at_lambda_loss": self.loss_at_lambda_loss,
            "error_at_lambda_loss": self.error_at_lambda_loss,
            "p_levels": list(self.p_levels), "failed": list(self.failed), "meta": self.meta,
        }


def _argmin_first(values):
    """Index of the minimum; exact ties go to the smallest index, NaNs are skipped."""
    values = np.asarray(values, float)
    if np.all(np.isnan(values)):
        raise ValueError("no finite values to minimise")
    return int(np.nanargmin(values))


def golden_section(f, lo: float, hi: float, rel_tol: float = 1e-3, max_iter: int = 200):
    """Minimise a unimodal f on [lo, hi] (both > 0) by golden section in log space.

    Stops when hi/lo - 1 <= rel_tol; returns (x_min, f(x_min)).
    """
    a, b = np.log(lo), np.log(hi)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(np.exp(c)), f(np.exp(d))
    for _ in range(max_iter):
        if np.expm1(b - a) <= rel_tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(np.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(np.exp(d))
    x = c if fc <= fd else d
    return float(np.exp(x)), float(min(fc, fd))


def _is_unimodal(values):
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    if len(v) < 3:
        return True
    k = int(np.argmin(v))
    return bool(np.all(np.diff(v[:k + 1]) <= 1e-12) and np.all(np.diff(v[k:]) >= -1e-12))


def sweep(alpha: float, tau: float, lambda_grid=None, cfg: SEConfig = DEFAULT_CONFIG,
          p_levels=(0.75,), refine: bool = True, rel_tol: float = 1e-3) -> LambdaSweep:
    """Asymptotic test error, test loss and calibration along a lambda grid.

    Grid points are solved in increasing lambda with warm starts.  A failing
    point is flagged, recorded in ``failed`` and excluded from the minimisation.
    """
    lambdas = np.sort(np.asarray(DEFAULT_GRID if lambda_grid is None else lambda_grid, float))
    if np.any(lambdas <= 0):
        raise ValueError("all lambda values must be positive")
    p_levels = tuple(float(p) for p in p_levels)
    errors = np.full(len(lambdas), np.nan)
    losses = np.full(len(lambdas), np.nan)
    cals = np.full((len(lambdas), len(p_levels)), np.nan)
    sols = [None] * len(lambdas)
    failed = []
    init = None
    for i, lam in enumerate(lambdas):
        try:
            ov = solve_erm(alpha, tau, lam, cfg, init=init)
        except SEError as exc:
            log.warning("state evolution failed at lambda=%g: %s", lam, exc)
            failed.append(float(lam))
            init = None
            continue
        init = (ov.m, ov.q_erm, ov.V_erm)
        sols[i] = ov
        errors[i] = erm_error(ov.m, ov.q_erm, tau)
        losses[i] = erm_loss(ov.m, ov.q_erm, tau, cfg)
        if p_levels:
            cals[i] = calibration_erm(np.array(p_levels), ov.m, ov.q_erm, tau)
    ok = np.isfinite(errors)
    if not ok.any():
        raise SEError("state evolution failed on every grid point")
    for name, col in (("error", errors), ("loss", losses)):
        if not _is_unimodal(col):
            log.info("%s curve is not unimodal on the grid (alpha=%g, tau=%g)", name, alpha, tau)

    def refine_min(col, metric):
        k = _argmin_first(col)
        if not refine or len(lambdas) < 3:
            return float(lambdas[k]), float(col[k])
        lo = lambdas[max(k - 1, 0)]
        hi = lambdas[min(k + 1, len(lambdas) - 1)]
        start = sols[k]

        def f(lam):
            ov = solve_erm(alpha, tau, lam, cfg, init=(start.m, start.q_erm, start.V_erm))
            return metric(ov)

        x, fx = golden_section(f, lo, hi, rel_tol)
        # keep the grid point if the refinement did not improve on it
        return (x, fx) if fx <= col[k] else (float(lambdas[k]), float(col[k]))

    lam_err, err_min = refine_min(errors, lambda ov: erm_error(ov.m, ov.q_erm, tau))
    lam_loss, loss_min = refine_min(losses, lambda ov: erm_loss(ov.m, ov.q_erm, tau, cfg))
    ov_loss = solve_erm(alpha, tau, lam_loss, cfg)
    return LambdaSweep(lambdas, errors, losses, cals, lam_err, lam_loss,
                       error_at_lambda_error=err_min, loss_at_lambda_loss=loss_min,
                       error_at_lambda_loss=erm_error(ov_loss.m, ov_loss.q_erm, tau),
                       p_levels=p_levels, failed=tuple(failed),
                       meta={"alpha": alpha, "tau": tau, "mode": "state-evolution"})


def calibration_at_optimal(alpha: float, tau: float, p: float, cfg: SEConfig = DEFAULT_CONFIG,
                           lambda_grid=None):
    """Calibration Delta_p of the logistic classifier at lambda_error and at lambda_loss."""
    sw = sweep(alpha, tau, lambda_grid, cfg, p_levels=())
    out = []
    for lam in (sw.lambda_error, sw.lambda_loss):
        ov = solve_erm(alpha, tau, lam, cfg)
        out.append(float(calibration_erm(p, ov.m, ov.q_erm, tau)))
    return tuple(out)


# ---------------------------------------------------------------------------
# Holdout protocol


def holdout_split(y, holdout_fraction: float, seed: int, max_attempts: int = 10):
    """Random train/validation index split with both classes in the validation set.

    A split whose validation labels are all equal is redrawn with seed + 1,
    seed + 2, ... at most ``max_attempts`` times in total.
    """
    if not 0 < holdout_fraction <= 0.5:
        raise ValueError("holdout_fraction must lie in (0, 0.5]")
    n = len(y)
    n_val = max(1, int(round(holdout_fraction * n)))
    for attempt in range(max_attempts):
        perm = np.random.default_rng(seed + attempt).permutation(n)
        val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        if len(np.unique(y[val])) == 2:
            return train, val
    raise ValueError(f"validation set single-class after {max_attempts} attempts")


def empirical_crossval(data: Dataset, lambda_grid=None, holdout_fraction: float = 0.2,
                       seed: int = 0, p_levels=(0.75,), half_width: float = 0.02) -> LambdaSweep:
    """Single holdout split; one direct logistic fit per lambda on the training part.

    Validation error and mean logistic loss are measured on the held-out part.
    Calibration columns hold binned p - mean(f_star) on the validation set
    (NaN when a bin is empty).  Minimisers are the grid points themselves,
    ties broken towards the smaller index in the supplied grid order.
    """
    lambdas = np.asarray(DEFAULT_GRID if lambda_grid is None else lambda_grid, float)
    if np.any(lambdas < 0):
        raise ValueError("lambda values must be non-negative")
    train_idx, val_idx = holdout_split(data.y, holdout_fraction, seed)
    train, val = data.subset(train_idx), data.subset(val_idx)
    errors, losses = np.empty(len(lambdas)), np.empty(len(lambdas))
    cals = np.full((len(lambdas), len(p_levels)), np.nan)
    f_star = oracle_confidence(val.X, data.w_star, data.tau)
    failed = []
    for i, lam in enumerate(lambdas):
        sol = erm_mod.minimize(train, float(lam))
        if sol.status not in ("converged",):
            failed.append(float(lam))
        margin = val.y * (val.X @ sol.w_hat)
        errors[i] = np.mean(margin < 0) + 0.5 * np.mean(margin == 0)
        losses[i] = np.mean(np.logaddexp(0.0, -margin))
        conf = erm_mod.erm_confidence(val.X, sol.w_hat)
        for j, p in enumerate(p_levels):
            sel = np.abs(conf - p) <= half_width
            if sel.any():
                cals[i, j] = p - np.mean(f_star[sel])
    ke, kl = _argmin_first(errors), _argmin_first(losses)
    return LambdaSweep(lambdas, errors, losses, cals, float(lambdas[ke]), float(lambdas[kl]),
                       error_at_lambda_error=float(errors[ke]),
                       loss_at_lambda_loss=float(losses[kl]),
                       error_at_lambda_loss=float(errors[kl]), p_levels=tuple(p_levels),
                       failed=tuple(failed),
                       meta={"mode": "holdout", "holdout_fraction": holdout_fraction,
                             "seed": seed, "n_train": int(len(train_idx)),
                             "n_val": int(len(val_idx))})
