"""Joint law of the teacher, Bayes and logistic confidences, and calibration.

Latent pre-activations ``(nu, lam_bo, lam_erm) ~ N(0, Sigma)`` with

    Sigma = [[1, q_bo, m], [q_bo, q_bo, m], [m, m, q_erm]]

are pushed through the links

    f_star = Phi(nu / tau),  f_bo = Phi(lam_bo / tau'),  f_erm = sigmoid(lam_erm)

where ``tau'^2 = tau^2 + 1 - q_bo``.  Densities on the confidence cube are
obtained by the change of variables and evaluated in log space.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, special

from .links import (LOG_SQRT_2PI, log_sigma_star_prime, log_sigmoid_prime, logit,
                    sigma_star, sigma_star_inv, sigma_star_prime, sigmoid)
from .state_evolution import (DEFAULT_CONFIG, SEConfig, Overlaps, gauss_hermite,
                              sigma_matrix)

PAIRS = ("star-erm", "bo-erm", "star-bo")
# confidences closer than this to 0 or 1 are treated as unresolved by the inverse links
CLAMP_SAFE = 1e-10
# which latent coordinates each 2-d marginal uses
_PAIR_INDEX = {"star-erm": (0, 2), "bo-erm": (1, 2), "star-bo": (0, 1)}


class DensityError(ValueError):
    pass


@dataclass(frozen=True)
class JointGaussianSpec:
    sigma: np.ndarray
    tau: float
    tau_prime: float

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float)
        if s.shape != (3, 3) or not np.allclose(s, s.T):
            raise ValueError("sigma must be a symmetric 3x3 matrix")
        if np.min(np.linalg.eigvalsh(s)) < -1e-12:
            raise ValueError("sigma is not positive semidefinite")
        if not np.isclose(self.tau_prime ** 2, self.tau ** 2 + 1.0 - s[1, 1], rtol=0, atol=1e-12):
            raise ValueError("tau_prime^2 must equal tau^2 + 1 - q_bo")
        object.__setattr__(self, "sigma", s)

    @classmethod
    def from_overlaps(cls, q_bo: float, m: float, q_erm: float, tau: float):
        if tau < 0:
            raise ValueError("tau must be non-negative")
        return cls(sigma_matrix(q_bo, m, q_erm), float(tau),
                   float(np.sqrt(tau ** 2 + 1.0 - q_bo)))

    @classmethod
    def from_se(cls, ov: Overlaps):
        return cls.from_overlaps(ov.q_bo, ov.m, ov.q_erm, ov.tau)

    @property
    def q_bo(self):
        return float(self.sigma[1, 1])

    @property
    def m(self):
        return float(self.sigma[0, 2])

    @property
    def q_erm(self):
        return float(self.sigma[2, 2])

    def link_scales(self):
        return np.array([self.tau, self.tau_prime, 1.0])

    def to_dict(self):
        return {"sigma": self.sigma.tolist(), "tau": self.tau, "tau_prime": self.tau_prime}


@dataclass
class CalibrationCurve:
    p_grid: np.ndarray
    delta: np.ndarray
    kind: str = "vs-teacher"
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Densities


def _check_density_spec(spec, idx):
    if 0 in idx and spec.tau <= 0:
        raise DensityError("densities need tau > 0 (the teacher link is a step at tau = 0)")
    sub = spec.sigma[np.ix_(idx, idx)]
    if np.linalg.det(sub) <= 1e-14 * np.prod(np.diag(sub)):
        raise DensityError("covariance is singular; evaluate a 2-d marginal instead")
    return sub


def _latent(coords, idx, spec):
    """Map confidences to latent fields plus their log Jacobians |d latent / d conf|."""
    scales = spec.link_scales()
    lat, logjac = [], []
    for u, k in zip(coords, idx):
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0) | (u >= 1)):
            raise DensityError("confidences must lie strictly inside (0, 1)")
        if k == 2:
            t = logit(u)
            lat.append(t)
            logjac.append(-log_sigmoid_prime(t))
        else:
            t = sigma_star_inv(u)
            lat.append(scales[k] * t)
            logjac.append(np.log(scales[k]) - log_sigma_star_prime(t))
    return lat, logjac


def _log_gauss(lat, cov):
    k = len(lat)
    L = np.linalg.cholesky(cov)
    X = np.stack(np.broadcast_arrays(*lat), axis=-1)
    sol = np.linalg.solve(L, X[..., None])[..., 0]  # broadcasts over leading axes
    quad = np.sum(sol * sol, axis=-1)
    return -0.5 * quad - k * LOG_SQRT_2PI - np.sum(np.log(np.diag(L)))


def _density(coords, idx, spec, log):
    cov = _check_density_spec(spec, idx)
    lat, logjac = _latent(coords, idx, spec)
    out = _log_gauss(lat, cov) + sum(np.broadcast_arrays(*logjac))
    if not log:
        out = np.exp(out)
    return out[()] if np.ndim(out) == 0 else out


def joint_density(a, b, c, spec: JointGaussianSpec, log: bool = False):
    """Density of (f_star, f_bo, f_erm) at (a, b, c); broadcasts."""
    return _density((a, b, c), (0, 1, 2), spec, log)


def marginal_density_2d(pair: str, u, v, spec: JointGaussianSpec, log: bool = False):
    """Density of one pair of confidences: ``star-erm``, ``bo-erm`` or ``star-bo``."""
    if pair not in _PAIR_INDEX:
        raise ValueError(f"pair must be one of {PAIRS}")
    return _density((u, v), _PAIR_INDEX[pair], spec, log)


def push_forward_samples(spec: JointGaussianSpec, n: int, seed: int = 0, batch: int = 1_000_000):
    """Draw (f_star, f_bo, f_erm) by sampling the latent Gaussian and mapping through the links."""
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(spec.sigma + 1e-15 * np.eye(3))
    out = np.empty((n, 3))
    done = 0
    while done < n:
        k = min(batch, n - done)
        lat = rng.standard_normal((k, 3)) @ L.T
        out[done:done + k, 0] = sigma_star(lat[:, 0], spec.tau)
        out[done:done + k, 1] = sigma_star(lat[:, 1], spec.tau_prime)
        out[done:done + k, 2] = sigmoid(lat[:, 2])
        done += k
    return out


def _edge_to_latent(edges, k, spec, clip=9.0):
    """Confidence bin edges mapped to latent coordinates; infinite ends clipped."""
    sd = np.sqrt(spec.sigma[k, k])
    edges = np.asarray(edges, dtype=float)
    with np.errstate(divide="ignore"):
        if k == 2:
            t = special.logit(edges)
        else:
            t = spec.link_scales()[k] * special.ndtri(edges)
    return np.clip(t, -clip * sd, clip * sd)


def _gl_panels(breaks, order):
    xg, wg = np.polynomial.legendre.leggauss(order)
    lo, hi = breaks[:-1, None], breaks[1:, None]
    return (0.5 * (hi - lo) * xg + 0.5 * (hi + lo)), 0.5 * (hi - lo) * wg


def _to_conf(t, k, spec):
    """Latent field -> (confidence, |d confidence / d latent|)."""
    if k == 2:
        u, dj = sigmoid(t), np.exp(log_sigmoid_prime(t))
    else:
        sc = spec.link_scales()[k]
        u, dj = sigma_star(t / sc), np.exp(log_sigma_star_prime(t / sc)) / sc
    # the density takes confidences; keep them representable inside (0, 1)
    return np.clip(u, 1e-300, 1.0 - 1e-16), dj


def _outer_rule(t_edges, h, order):
    """Bin-aligned composite Gauss-Legendre nodes, with the bin of each node."""
    nodes, weights, bins = [], [], []
    for i, (lo, hi) in enumerate(zip(t_edges[:-1], t_edges[1:])):
        if hi <= lo:
            continue
        n_pan = max(1, int(np.ceil((hi - lo) / h)))
        tn, wn = _gl_panels(np.linspace(lo, hi, n_pan + 1), order)
        nodes.append(tn.ravel())
        weights.append(wn.ravel())
        bins.append(np.full(tn.size, i))
    return np.concatenate(nodes), np.concatenate(weights), np.concatenate(bins)


def _pair_cell_integral(edges, spec, pair, order, inner_weight=None, n_extra=None):
    """Windowed composite rule for a 2-d marginal.

    The outer coordinate gets a bin-aligned composite rule; for each outer node
    the inner coordinate is integrated over +-9 conditional sd around its
    conditional mean, with panels split at the bin edges.  The integrand is
    ``marginal_density_2d`` times the link Jacobians, optionally multiplied by
    ``inner_weight(t_inner) -> (n_extra, nodes)``.
    """
    idx = _PAIR_INDEX[pair]
    i_in, i_out = idx
    S = spec.sigma
    nb = len(edges) - 1
    te_out = _edge_to_latent(edges, i_out, spec)
    te_in = _edge_to_latent(edges, i_in, spec, clip=np.inf)
    sd_out = np.sqrt(S[i_out, i_out])
    slope = S[i_in, i_out] / S[i_out, i_out]
    c_sd = np.sqrt(max(S[i_in, i_in] - S[i_in, i_out] ** 2 / S[i_out, i_out], 0.0))
    to, wo, bo = _outer_rule(te_out, 0.05 * sd_out, order)
    uo, djo = _to_conf(to, i_out, spec)
    shape = (nb, nb) if inner_weight is None else (n_extra, nb, nb)
    out = np.zeros(shape)
    finite_in = te_in[np.isfinite(te_in)]
    for t, w, bj, u_o, dj_o in zip(to, wo, bo, uo, djo):
        mu = slope * t
        lo, hi = mu - 9.0 * c_sd, mu + 9.0 * c_sd
        inside = finite_in[(finite_in > lo) & (finite_in < hi)]
        breaks = np.unique(np.concatenate([np.linspace(lo, hi, 41), inside]))
        tn, wn = _gl_panels(breaks, order)
        mids = 0.5 * (breaks[:-1] + breaks[1:])
        bi = np.clip(np.searchsorted(te_in, mids) - 1, 0, nb - 1)
        u_i, dj_i = _to_conf(tn, i_in, spec)
        args = (u_i, u_o) if i_in < i_out else (u_o, u_i)
        dens = marginal_density_2d(pair, *args, spec) * dj_i * dj_o
        # beyond the inverse-link clamp the confidence no longer pins down the
        # latent point; there the same density is taken in latent form
        lost = (np.minimum(u_i, 1 - u_i) < CLAMP_SAFE) | (min(u_o, 1 - u_o) < CLAMP_SAFE)
        if np.any(lost):
            lat = (tn, t) if i_in < i_out else (t, tn)
            dens = np.where(lost, np.exp(_log_gauss(lat, S[np.ix_(idx, idx)])), dens)
        dens = dens * wn
        if inner_weight is None:
            np.add.at(out[:, bj], bi, w * dens.sum(axis=1))
        else:
            vals = inner_weight(tn)                       # (n_extra, panels, order)
            contrib = w * np.sum(vals * dens[None], axis=2)
            for e in range(n_extra):
                np.add.at(out[e, :, bj], bi, contrib[e])
    return out if i_in < i_out else np.swapaxes(out, -1, -2)


def _conditional_sd(cov):
    prec = np.linalg.inv(cov)
    return 1.0 / np.sqrt(np.diag(prec))


def cell_masses(edges, spec: JointGaussianSpec, pair: Optional[str] = None, order: int = 4):
    """Integral of the density over each cell of a tensor grid of confidence edges.

    2-d marginals are integrated in latent coordinates by a windowed composite
    Gauss-Legendre rule (see ``_pair_cell_integral``); the density is
    evaluated at the mapped nodes and multiplied by the link Jacobians, so the
    result exercises the density formula rather than bypassing it.
    ``pair=None`` gives the full 3-d grid: given the Bayes field the teacher
    field is N(lam_bo, 1 - q_bo) independently of the ERM field, so the
    teacher bin probability is folded into the (bo, erm) integral exactly.
    """
    edges = np.asarray(edges, dtype=float)
    if pair is not None:
        if pair not in _PAIR_INDEX:
            raise ValueError(f"pair must be one of {PAIRS}")
        _check_density_spec(spec, _PAIR_INDEX[pair])
        return _pair_cell_integral(edges, spec, pair, order)
    _check_density_spec(spec, (0, 1, 2))
    t_edges = _edge_to_latent(edges, 0, spec, clip=np.inf)
    sd = np.sqrt(1.0 - spec.q_bo)

    def teacher_bins(lam_bo):
        cdf = special.ndtr((t_edges[:, None, None] - lam_bo[None]) / sd)
        return np.diff(cdf, axis=0)

    return _pair_cell_integral(edges, spec, "bo-erm", order, teacher_bins, len(edges) - 1)


def conditional_teacher_density(a, b, spec: JointGaussianSpec):
    """Density of f_star at a given f_bo = b (the teacher field given the Bayes field)."""
    t = spec.tau * sigma_star_inv(a)
    lam = spec.tau_prime * sigma_star_inv(b)
    sd = np.sqrt(1.0 - spec.q_bo)
    logd = (-0.5 * ((t - lam) / sd) ** 2 - LOG_SQRT_2PI - np.log(sd)
            + np.log(spec.tau) - log_sigma_star_prime(sigma_star_inv(a)))
    return np.exp(logd)


def integrate_density(spec: JointGaussianSpec, pair: Optional[str] = None, bins: int = 10) -> float:
    """Total mass of the density on (0, 1)^k: the sum of :func:`cell_masses`.

    A plain tensor rule is hopeless here: at large alpha the Bayes and logistic
    fields are almost collinear and the density lives on a thin ridge.
    """
    return float(np.sum(cell_masses(np.linspace(0.0, 1.0, bins + 1), spec, pair)))


# ---------------------------------------------------------------------------
# Calibration


def _erm_slope(m, q_erm, tau):
    if q_erm <= 0:
        raise ValueError("q_erm must be positive")
    resid = 1.0 - m * m / q_erm + tau ** 2
    if resid <= 0:
        raise ValueError("m^2/q_erm >= 1 + tau^2 is impossible at a valid fixed point")
    return (m / q_erm) / np.sqrt(resid)


def calibration_erm(p, m: float, q_erm: float, tau: float):
    """p - E[f_star | f_erm = p].

    Given lam_erm = logit(p) the teacher field is N((m/q) logit(p), 1 - m^2/q),
    so the conditional mean of Phi(nu / tau) is Phi(+(m/q) logit(p) / sqrt(1 - m^2/q + tau^2)).
    The sign inside Phi is positive: a Monte-Carlo binned estimate confirms it
    (tests/test_uncertainty.py) and it is the one consistent with Delta_p -> p - 1
    as lambda -> infinity.
    """
    p = np.asarray(p, dtype=float)
    out = p - sigma_star(_erm_slope(m, q_erm, tau) * logit(p))
    return out[()] if out.ndim == 0 else out


def calibration_erm_vs_bayes(p, m: float, q_erm: float, q_bo: float, tau: float):
    """p - E[f_bo | f_erm = p] via the conditional law of the Bayes field.

    lam_bo | lam_erm = l  ~  N((m/q) l, q_bo - m^2/q) and
    E[Phi(X / tau')] = Phi(mu / sqrt(tau'^2 + s^2)) for X ~ N(mu, s^2).
    """
    if q_erm <= 0:
        raise ValueError("q_erm must be positive")
    cond_var = q_bo - m * m / q_erm
    if cond_var < -1e-12:
        raise ValueError(f"negative conditional variance q_bo - m^2/q_erm = {cond_var:g}")
    tau_p2 = tau ** 2 + 1.0 - q_bo
    p = np.asarray(p, dtype=float)
    mu = (m / q_erm) * logit(p)
    out = p - sigma_star(mu / np.sqrt(tau_p2 + max(cond_var, 0.0)))
    return out[()] if out.ndim == 0 else out


def calibration_curve(p_grid, ov: Overlaps, kind: str = "vs-teacher") -> CalibrationCurve:
    p_grid = np.asarray(p_grid, dtype=float)
    if kind == "vs-teacher":
        delta = calibration_erm(p_grid, ov.m, ov.q_erm, ov.tau)
    elif kind == "vs-bayes":
        delta = calibration_erm_vs_bayes(p_grid, ov.m, ov.q_erm, ov.q_bo, ov.tau)
    else:
        raise ValueError("kind must be 'vs-teacher' or 'vs-bayes'")
    return CalibrationCurve(p_grid, np.atleast_1d(delta), kind,
                            {"alpha": ov.alpha, "tau": ov.tau, "lambda": ov.lam})


def conditional_moments(target: str, p: float, spec: JointGaussianSpec,
                        cfg: SEConfig = DEFAULT_CONFIG):
    """Mean and variance of f_star (``teacher``) or f_bo (``bayes``) given f_erm = p.

    1-d Gauss-Hermite over the conditional Gaussian of the target field.
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    k, scale = {"teacher": (0, spec.tau), "bayes": (1, spec.tau_prime)}[target]
    if scale <= 0:
        raise DensityError("teacher link is a step at tau = 0")
    s = spec.sigma
    ell = float(logit(p))
    mean = s[k, 2] / s[2, 2] * ell
    var = max(s[k, k] - s[k, 2] ** 2 / s[2, 2], 0.0)
    x, w = gauss_hermite(cfg.quadrature_nodes)
    vals = sigma_star((mean + np.sqrt(var) * x) / scale)
    mu = float(np.sum(w * vals))
    second = float(np.sum(w * vals * vals))
    return mu, max(second - mu * mu, 0.0)


def bayes_self_calibration(p, spec: JointGaussianSpec):
    """p - E[f_star | f_bo = p], integrating the teacher field given the Bayes field.

    nu | lam_bo = l ~ N(l, 1 - q_bo) since cov(nu, lam_bo) = var(lam_bo) = q_bo.
    The integrand is a smoothed step of width tau / sd around -l / sd, so an
    adaptive rule with a breakpoint there replaces fixed Gauss-Hermite nodes.
    """
    if spec.tau <= 0:
        raise DensityError("needs tau > 0")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    lam = spec.tau_prime * sigma_star_inv(p)
    sd = np.sqrt(max(1.0 - spec.q_bo, 0.0))
    out = np.empty_like(p)
    for i, l in enumerate(lam):
        if sd == 0.0:
            out[i] = sigma_star(l / spec.tau)
            continue
        f = lambda x: sigma_star((l + sd * x) / spec.tau) * sigma_star_prime(x)  # noqa: E731
        x0 = float(np.clip(-l / sd, -12.0, 12.0))
        out[i] = (integrate.quad(f, -14.0, x0, epsabs=1e-15, epsrel=1e-13, limit=200)[0]
                  + integrate.quad(f, x0, 14.0, epsabs=1e-15, epsrel=1e-13, limit=200)[0])
    return p - out


def binned_calibration(conf, target, p: float, half_width: float = 0.01):
    """Binned estimate of mean(conf - target) over samples with |conf - p| <= half_width.

    Returns ``(delta, count)``; ``delta`` is NaN for an empty bin.
    """
    conf = np.asarray(conf, float)
    sel = np.abs(conf - p) <= half_width
    cnt = int(np.sum(sel))
    if cnt == 0:
        return float("nan"), 0
    return float(np.mean(conf[sel] - np.asarray(target, float)[sel])), cnt
