"""Acceptance suite: criteria 1 to 10, one printed PASS/FAIL line each.

Seeds are fixed in advance (0 unless stated) and never tuned.
"""

import json
import time

import numpy as np
import pytest
from scipy import special, stats

from probit_uq import cli, crossval, erm_solver as erm, gamp_core as gamp, probit_model as pm, state_evolution as se
from probit_uq import uncertainty as unc
from probit_uq.channels import bayes_probit, logistic_erm
from probit_uq.probit_model import ModelParams

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def close(value, target, tol):
    return abs(value - target) <= tol


# ---------------------------------------------------------------------------


def test_criterion_1_bayes_error(report):
    cases = [((10.0, 0.5), 0.173), ((5.0, 0.0), 0.083), ((5.0, 0.5), 0.198), ((5.0, 2.0), 0.402)]
    lines, ok = [], True
    for (alpha, tau), target in cases:
        se._solve_bo_cached.cache_clear()
        t0 = time.perf_counter()
        err = se.bayes_error(se.solve_bo(alpha, tau), tau)
        dt = time.perf_counter() - t0
        good = close(err, target, 0.002) and dt < 5.0
        ok &= good
        lines.append(f"({alpha:g},{tau:g}) {err:.4f} vs {target} [{dt:.2f}s]{'' if good else ' <-'}")
    report(1, ok, "; ".join(lines))


def test_criterion_2_oracle_error(report):
    rng = np.random.default_rng(0)
    n = 1_000_000
    lines, ok = [], True
    for tau, target in ((0.1, 0.032), (0.5, 0.148), (2.0, 0.352)):
        exact = pm.oracle_test_error(tau)
        v = rng.standard_normal(n)
        xi = rng.standard_normal(n)
        mc = np.mean(np.sign(v) != np.sign(v + tau * xi))
        sd = np.sqrt(exact * (1 - exact) / n)
        good = close(exact, target, 0.001) and abs(mc - exact) <= 3 * sd
        ok &= good
        lines.append(f"tau={tau:g} {exact:.4f} (MC {mc:.4f}, z={(mc - exact) / sd:+.2f})")
    report(2, ok, "; ".join(lines))


def test_criterion_3_lambda_selection(report):
    lines, ok = [], True
    expected = {
        (10.0, 0.5): dict(le=0.0976, ee=0.1732, ll=0.0980, el=0.1734, rel=False, tol=0.002),
        (5.0, 0.0): dict(le=0.0039, ee=0.0843, ll=0.0096, el=0.0847, rel=True, tol=0.2),
        (100.0, 0.5): dict(le=1.573, ee=None, ll=1.570, el=None, rel=False, tol=0.01),
    }
    for (alpha, tau), e in expected.items():
        t0 = time.perf_counter()
        sw = crossval.sweep(alpha, tau, p_levels=())
        dt = time.perf_counter() - t0

        def lam_ok(got, want):
            return abs(got - want) <= (e["tol"] * want if e["rel"] else e["tol"])

        good = lam_ok(sw.lambda_error, e["le"]) and lam_ok(sw.lambda_loss, e["ll"]) and dt < 300
        if e["ee"] is not None:
            good &= close(sw.error_at_lambda_error, e["ee"], 0.001)
            good &= close(sw.error_at_lambda_loss, e["el"], 0.001)
        good &= not sw.failed
        ok &= good
        lines.append(f"({alpha:g},{tau:g}) lambda_error={sw.lambda_error:.4g} "
                     f"eps={sw.error_at_lambda_error:.4f}, lambda_loss={sw.lambda_loss:.4g} "
                     f"eps={sw.error_at_lambda_loss:.4f} [{dt:.0f}s]{'' if good else ' <-'}")
    report(3, ok, "; ".join(lines))


def test_criterion_4_gamp_vs_theory(report):
    t0 = time.perf_counter()
    data = pm.generate(ModelParams(1000, 10.0, 0.5), seed=0)
    res = gamp.run_gamp(data, bayes_probit(0.5), seed=0)
    dt = time.perf_counter() - t0
    q = se.solve_bo(10.0, 0.5)
    d = data.d
    m_hat, q_hat = res.w_hat @ data.w_star / d, res.w_hat @ res.w_hat / d
    c_bar = float(np.mean(res.c_hat))
    ok = (res.converged and close(m_hat, q, 0.02) and close(q_hat, q, 0.02)
          and abs(m_hat - q_hat) <= 0.03 and close(c_bar, 1 - q, 0.03) and dt < 120)
    report(4, ok, f"q_bo={q:.4f} m={m_hat:.4f} q={q_hat:.4f} gap={abs(m_hat - q_hat):.4f} "
                  f"mean c={c_bar:.4f} vs {1 - q:.4f}; |w*|^2/d={data.w_star @ data.w_star / d:.4f} "
                  f"[{dt:.1f}s]")


def test_criterion_5_gamp_erm_vs_direct(report):
    data = pm.generate(ModelParams(500, 5.0, 0.5), seed=0)
    res = gamp.run_gamp(data, logistic_erm(0.1), tol=1e-9, max_iter=5000)
    direct = erm.minimize(data, 0.1)
    cos = res.w_hat @ direct.w_hat / (np.linalg.norm(res.w_hat) * np.linalg.norm(direct.w_hat))
    rms = float(np.sqrt(np.mean((res.w_hat - direct.w_hat) ** 2)))
    ok = cos >= 0.999 and rms <= 1e-3 and res.converged and direct.status == "converged"
    report(5, ok, f"cosine={cos:.12f} rms={rms:.2e} (GAMP {res.iterations_used} it, "
                  f"Newton {direct.iterations} it)")


def _null_exceedances(expected, n, z_max):
    """Expected number of |z| > z_max cells under exact binomial counts."""
    p = expected / n
    sd = np.sqrt(expected * (1 - p))
    upper = np.floor(expected + z_max * sd)
    lower = np.ceil(expected - z_max * sd)
    return float(np.sum(stats.binom.sf(upper, n, p) + stats.binom.cdf(lower - 1, n, p)))


def _histogram_check(counts, mass, n, z_max=4.0, min_expected=5.0):
    expected = n * mass
    big = expected >= min_expected
    p = mass[big]
    z = (counts[big] - expected[big]) / np.sqrt(expected[big] * (1 - p))
    pooled_e, pooled_c = expected[~big].sum(), counts[~big].sum()
    pooled_z = (pooled_c - pooled_e) / np.sqrt(max(pooled_e, 1e-300)) if pooled_e > 0 else 0.0
    null = _null_exceedances(expected[big], n, z_max)
    allowed = int(stats.poisson.ppf(0.999, null))
    hits = int(np.sum(np.abs(z) > z_max))
    ok = hits <= allowed and abs(pooled_z) <= z_max
    return ok, (f"{int(big.sum())} cells, max|z|={np.max(np.abs(z)):.2f}, |z|>4: {hits} "
                f"(null mean {null:.2f}, allowed {allowed}), pooled z={pooled_z:+.2f}")


def test_criterion_6_density(report):
    spec = unc.JointGaussianSpec.from_se(se.solve_erm(10.0, 0.5, 0.0))
    n = 1_000_000
    samples = unc.push_forward_samples(spec, n, seed=0)
    edges = np.linspace(0.0, 1.0, 51)
    lines, ok = [], True
    for pair in unc.PAIRS:
        i, j = unc._PAIR_INDEX[pair]
        counts, _, _ = np.histogram2d(samples[:, i], samples[:, j], bins=[edges, edges])
        mass = unc.cell_masses(edges, spec, pair)
        good, msg = _histogram_check(counts, mass, n)
        total = unc.integrate_density(spec, pair)
        good &= close(total, 1.0, 0.01)
        ok &= good
        lines.append(f"{pair}: {msg}, integral={total:.6f}")
    counts, _ = np.histogramdd(samples, bins=[edges] * 3)
    mass = unc.cell_masses(edges, spec)
    good, msg = _histogram_check(counts, mass, n)
    total = unc.integrate_density(spec)
    good &= close(total, 1.0, 0.01)
    ok &= good
    lines.append(f"joint: {msg}, integral={total:.6f}")
    report(6, ok, "; ".join(lines))


def test_criterion_7_calibration_identities(report):
    p = np.linspace(0.01, 0.99, 99)
    parts, ok = [], True
    # Bayes self-calibration at several state-evolution points
    worst = 0.0
    for alpha, tau, lam in ((10.0, 0.5, 0.0), (5.0, 0.5, 0.1), (5.0, 2.0, 0.5), (100.0, 0.1, 1.0)):
        spec = unc.JointGaussianSpec.from_se(se.solve_erm(alpha, tau, lam))
        worst = max(worst, float(np.max(np.abs(unc.bayes_self_calibration(p, spec)))))
    good = worst <= 1e-8
    ok &= good
    parts.append(f"max|Delta_p(f_bo)|={worst:.1e}")
    # Delta_p against the teacher equals Delta_p against the Bayes predictor
    gap = 0.0
    for alpha, tau, lam in ((10.0, 0.5, 0.0), (5.0, 0.5, 0.1), (5.0, 2.0, 0.5), (3.0, 1.0, 0.01)):
        ov = se.solve_erm(alpha, tau, lam)
        a = unc.calibration_erm(p, ov.m, ov.q_erm, tau)
        b = unc.calibration_erm_vs_bayes(p, ov.m, ov.q_erm, ov.q_bo, tau)
        gap = max(gap, float(np.max(np.abs(a - b))))
    good = gap <= 1e-10
    ok &= good
    parts.append(f"max|Delta_p - tilde Delta_p|={gap:.1e}")
    # separable regime at lambda = 0: approach through lambda -> 0+
    alpha, tau, pp = 1.5, 2.0, 0.75
    with pytest.raises(se.SeparableRegimeError):
        se.solve_erm(alpha, tau, 0.0)
    init, dev = None, []
    for lam in (1e-2, 1e-3, 1e-4, 1e-5):
        ov = se.solve_erm(alpha, tau, lam, init=init)
        init = (ov.m, ov.q_erm, ov.V_erm)
        dev.append(float(unc.calibration_erm(pp, ov.m, ov.q_erm, tau)) - (pp - 0.5))
    good = abs(dev[-1]) <= 0.01 and all(abs(x) > abs(y) for x, y in zip(dev, dev[1:]))
    ok &= good
    parts.append("separable Delta_0.75 - 0.25 along lambda=1e-2..1e-5: "
                 + ", ".join(f"{x:+.4f}" for x in dev))
    # conditional spread of the teacher exceeds that of the Bayes predictor
    spec = unc.JointGaussianSpec.from_se(se.solve_erm(10.0, 0.5, 0.0))
    (mt, vt), (mb, vb) = (unc.conditional_moments(k, 0.75, spec) for k in ("teacher", "bayes"))
    good = vt > vb and abs(mt - mb) <= 1e-9
    ok &= good
    parts.append(f"var f_star={vt:.4f} > var f_bo={vb:.5f} (means {mt:.6f}, {mb:.6f})")
    report(7, ok, "; ".join(parts))


def test_criterion_8_empirical_calibration(report):
    tau, p, trials = 2.0, 0.75, 10
    parts, ok = [], True
    for alpha in (3.0, 5.0, 10.0, 30.0):
        ov = se.solve_erm(alpha, tau, 0.0)
        theory = float(unc.calibration_erm(p, ov.m, ov.q_erm, tau))
        theory_bo = float(unc.calibration_erm_vs_bayes(p, ov.m, ov.q_erm, ov.q_bo, tau))
        seeds = [100 * k for k in range(trials)]
        rows = cli.empirical_calibration(alpha, tau, 0.0, 300, seeds, 100_000, p, half=0.01)
        d_star = np.array([r[0] for r in rows])
        d_bo = np.array([r[1] for r in rows])
        statuses = {r[5] for r in rows}
        se_star = d_star.std(ddof=1) / np.sqrt(trials)
        se_bo = d_bo.std(ddof=1) / np.sqrt(trials)
        good = (abs(d_star.mean() - theory) <= 3 * se_star
                and abs(d_bo.mean() - theory_bo) <= 3 * se_bo)
        ok &= good
        parts.append(f"alpha={alpha:g}: Delta {d_star.mean():.4f}+-{se_star:.4f} vs {theory:.4f}, "
                     f"tilde {d_bo.mean():.4f}+-{se_bo:.4f} vs {theory_bo:.4f} "
                     f"{sorted(statuses)}{'' if good else ' <-'}")
    report(8, ok, "; ".join(parts))


def test_criterion_9_large_lambda_limit(report):
    """Delta_p - (p - 1) = Phi(-s logit p) underflows double precision once
    lambda >= 100, so monotonicity is checked on its logarithm."""
    lams = (10.0, 1e2, 1e3, 1e4)
    parts, ok = [], True
    for alpha, tau in ((5.0, 0.0), (5.0, 0.5), (5.0, 2.0), (10.0, 0.5)):
        for pp in (0.6, 0.75, 0.9):
            gaps, deltas = [], []
            for lam in lams:
                ov = se.solve_erm(alpha, tau, lam)
                slope = unc._erm_slope(ov.m, ov.q_erm, tau)
                gaps.append(float(special.log_ndtr(-slope * special.logit(pp))))
                deltas.append(float(unc.calibration_erm(pp, ov.m, ov.q_erm, tau)))
            good = (all(a > b for a, b in zip(gaps, gaps[1:]))
                    and abs(deltas[-1] - (pp - 1.0)) < 0.01)
            ok &= good
            if not good or pp == 0.75:
                parts.append(f"({alpha:g},{tau:g},p={pp}) log gap to p-1: "
                             + ", ".join(f"{x:.4g}" for x in gaps))
    report(9, ok, "; ".join(parts))


def test_criterion_10_determinism(report, tmp_path):
    pipelines = [
        ("generate", "--d", "40", "--alpha", "3", "--tau", "0.5", "--seed", "11"),
        ("gamp", "--d", "80", "--alpha", "4", "--tau", "0.5", "--n-test", "5000", "--seed", "2"),
        ("erm", "--d", "80", "--alpha", "4", "--tau", "0.5", "--lambda", "0.1", "--n-test", "5000"),
        ("se", "--alpha", "10", "--tau", "0.5", "--lambda", "0.1"),
        ("density", "--alpha", "10", "--tau", "0.5", "--lambda", "0.1", "--pair", "star-bo",
         "--grid", "8"),
        ("calibration", "--alpha", "5", "--tau", "0.5", "--lambda", "0.1", "--kind", "vs-bayes"),
        ("crossval", "--empirical", "--d", "50", "--alpha", "4", "--tau", "0.5",
         "--grid-points", "5", "--format", "json"),
        ("figure", "fig1", "--d", "100", "--n-test", "20000", "--bins", "10"),
    ]
    bad = []
    for k, args in enumerate(pipelines):
        a, b, c = (str(tmp_path / f"{k}{s}") for s in "abc")
        if cli.main([*args, "--out", a]) != 0 or cli.main([*args, "--out", b]) != 0:
            bad.append(f"{args[0]}: run failed")
            continue
        man = json.loads(open(f"{a}/manifest.json").read())
        for name in man["outputs"]:
            if open(f"{a}/{name}", "rb").read() != open(f"{b}/{name}", "rb").read():
                bad.append(f"{args[0]}: {name} differs between runs")
        if cli.main(["replay", f"{a}/manifest.json", "--out", c]) != 0:
            bad.append(f"{args[0]}: replay mismatch")
    report(10, not bad, f"{len(pipelines)} pipelines re-run and replayed byte-identically"
           if not bad else "; ".join(bad))
