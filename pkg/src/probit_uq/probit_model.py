"""Synthetic probit teacher-student instances.

Random streams
--------------
A dataset seed is expanded with ``numpy.random.SeedSequence(seed).spawn(3)``
into three independent PCG64 streams, used in this fixed order:

0. teacher weights ``w_star`` (d standard normals)
1. covariates ``X`` (n x d normals scaled by 1/sqrt(d))
2. label noise ``xi`` (n standard normals)

Fresh test points are drawn by :func:`sample_test` from their own seed with
the same layout (stream 0 unused, 1 for x, 2 for noise), so test sets never
share draws with the training set of the same seed.
"""

from dataclasses import dataclass
import io

import numpy as np

from .links import sigma_star

CSV_MAGIC = "probit_uq-dataset-v1"


@dataclass(frozen=True)
class ModelParams:
    d: int
    alpha: float
    tau: float
    lam: float = 0.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.tau >= 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.n < 1:
            raise ValueError("round(alpha * d) must be at least 1")

    @property
    def n(self) -> int:
        return int(round(self.alpha * self.d))


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    w_star: np.ndarray
    tau: float
    seed: int

    def __post_init__(self):
        for arr in (self.X, self.y, self.w_star):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def alpha(self) -> float:
        return self.n / self.d

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx].copy(), self.y[idx].copy(), self.w_star.copy(),
                       self.tau, self.seed)


def _streams(seed: int):
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3)]


def _labels(field_, tau, xi):
    pre = field_ + tau * xi
    # sign(0) is broken towards +1; it has probability zero for tau > 0
    return np.where(pre >= 0, 1.0, -1.0)


def generate(params: ModelParams, seed: int) -> Dataset:
    """Draw one training instance ``y = sign(X w_star + tau xi)``."""
    rng_w, rng_x, rng_xi = _streams(seed)
    d, n = params.d, params.n
    w_star = rng_w.standard_normal(d)
    X = rng_x.standard_normal((n, d)) / np.sqrt(d)
    xi = rng_xi.standard_normal(n)
    y = _labels(X @ w_star, params.tau, xi)
    return Dataset(X, y, w_star, float(params.tau), int(seed))


def sample_test(w_star, tau: float, n_test: int, seed: int):
    """Fresh test covariates and probit labels for a given teacher."""
    _, rng_x, rng_xi = _streams(seed)
    d = len(w_star)
    X = rng_x.standard_normal((n_test, d)) / np.sqrt(d)
    xi = rng_xi.standard_normal(n_test)
    return X, _labels(X @ w_star, tau, xi)


def oracle_confidence(x, w_star, tau: float):
    """Teacher confidence f*(x) = P(y=1 | x)."""
    return sigma_star(np.asarray(x) @ np.asarray(w_star), tau)


def oracle_test_error(tau: float) -> float:
    """Test error of sign(w_star . x) against probit labels: arctan(tau)/pi.

    The teacher field and the noisy pre-activation have correlation
    1/sqrt(1+tau^2); for a centred bivariate normal the sign-disagreement
    probability is arccos(corr)/pi, which equals arctan(tau)/pi.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return float(np.arctan(tau) / np.pi)


# ---------------------------------------------------------------------------
# CSV layout
#   line 1: magic
#   line 2: d,n,tau,seed
#   line 3: w_star (d values)
#   next n lines: x_1..x_d,y
# Floats are written with repr-precision so a round trip is exact.


def _fmt(v) -> str:
    return repr(float(v))


def dumps_csv(data: Dataset) -> str:
    buf = io.StringIO()
    buf.write(CSV_MAGIC + "\n")
    buf.write(f"{data.d},{data.n},{_fmt(data.tau)},{data.seed}\n")
    buf.write(",".join(_fmt(v) for v in data.w_star) + "\n")
    for row, label in zip(data.X, data.y):
        buf.write(",".join(_fmt(v) for v in row) + f",{int(label)}\n")
    return buf.getvalue()


def loads_csv(text: str) -> Dataset:
    lines = text.strip("\n").split("\n")
    if lines[0] != CSV_MAGIC:
        raise ValueError("not a probit_uq dataset file")
    d_s, n_s, tau_s, seed_s = lines[1].split(",")
    d, n = int(d_s), int(n_s)
    w_star = np.array([float(v) for v in lines[2].split(",")])
    body = np.array([[float(v) for v in ln.split(",")] for ln in lines[3:3 + n]])
    if w_star.shape != (d,) or body.shape != (n, d + 1):
        raise ValueError("dataset file has inconsistent dimensions")
    return Dataset(body[:, :d].copy(), body[:, d].copy(), w_star, float(tau_s), int(seed_s))


def save_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps_csv(data))


def load_csv(path) -> Dataset:
    with open(path) as fh:
        return loads_csv(fh.read())
