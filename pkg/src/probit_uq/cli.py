"""Command-line front end.

Every run writes its data files plus ``manifest.json`` (parameters, seeds,
library version, output hashes, wall time) into ``--out``.  Data files are a
deterministic function of the arguments; ``replay`` re-runs a manifest and
checks the hashes.

Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""

import argparse
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np
import scipy

from . import __version__
from . import crossval, erm_solver as erm, gamp_core as gamp, probit_model, state_evolution as se, svg, uncertainty as unc
from .channels import bayes_probit, logistic_erm
from .probit_model import ModelParams

log = logging.getLogger("probit_uq")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
FIGURES = ("fig1", "fig2", "fig3", "fig4", "fig5", "fig6")


class NumericalFailure(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    command: str
    params: dict
    seeds: list
    output_dir: str
    output_format: str = "csv"
    figure_id: str = None
    argv: list = field(default_factory=list)

    def __post_init__(self):
        if (self.command == "figure") != (self.figure_id is not None):
            raise ValueError("figure_id is required exactly when command is 'figure'")


# ---------------------------------------------------------------------------
# Output helpers


class Writer:
    """Collects output files for the manifest; all writes go through here."""

    def __init__(self, out_dir, fmt="csv"):
        self.out_dir = out_dir
        self.fmt = fmt
        self.files = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        self.files.append(name)
        return os.path.join(self.out_dir, name)

    def table(self, name, header, rows):
        """Fixed column order, header row, repr-precision floats, '.' decimal."""
        if self.fmt == "json":
            data = [dict(zip(header, map(_num, r))) for r in rows]
            self.json(name + ".json", {"columns": list(header), "rows": data})
            return
        with open(self.path(name + ".csv"), "w", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(_fmt(v) for v in r) + "\n")

    def json(self, name, obj):
        with open(self.path(name), "w", newline="\n") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def svg(self, name, fn, *args, **kw):
        fn(self.path(name), *args, **kw)


def _num(v):
    return v.item() if isinstance(v, np.generic) else v


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(_num(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def write_manifest(writer, cfg: ExperimentConfig, wall):
    outputs = {name: _sha256(os.path.join(writer.out_dir, name)) for name in writer.files}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "library": "probit_uq",
        "version": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "config": asdict(cfg),
        "outputs": outputs,
        "wall_time_s": round(wall, 3),
    }
    with open(os.path.join(writer.out_dir, "manifest.json"), "w", newline="\n") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# Shared pieces


def _se_config(args):
    return se.SEConfig(quadrature_nodes=getattr(args, "nodes", 199) or 199,
                       fp_tol=getattr(args, "tol_se", None) or se.DEFAULT_CONFIG.fp_tol)


def _dataset(args):
    if getattr(args, "data", None):
        return probit_model.load_csv(args.data)
    return probit_model.generate(ModelParams(args.d, args.alpha, args.tau), args.data_seed)


def _density_grid(spec, pair, bins):
    """Cell-averaged theoretical density on a bins x bins grid."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    mass = unc.cell_masses(edges, spec, pair)
    return edges, mass * bins * bins


def _hist_grid(u, v, bins):
    edges = np.linspace(0.0, 1.0, bins + 1)
    h, _, _ = np.histogram2d(u, v, bins=[edges, edges])
    return h / max(len(u), 1) * bins * bins


def _grid_rows(edges, grid):
    mid = 0.5 * (edges[1:] + edges[:-1])
    return [(mid[i], mid[j], grid[i, j]) for i in range(len(mid)) for j in range(len(mid))]


def test_confidences(data, n_test, seed, bayes=None, w_erm=None, batch=20_000):
    """Teacher, Bayes and logistic confidences on fresh test points.

    Test batches are drawn with seeds seed, seed+1, ...; returns a dict of
    arrays keyed ``star``, ``bo`` and ``erm`` (only those requested).
    """
    out = {"star": [], "bo": [], "erm": []}
    done = k = 0
    while done < n_test:
        size = min(batch, n_test - done)
        X, _ = probit_model.sample_test(data.w_star, data.tau, size, seed + k)
        out["star"].append(probit_model.oracle_confidence(X, data.w_star, data.tau))
        if bayes is not None:
            out["bo"].append(gamp.predict_bayes(X, bayes, data.tau))
        if w_erm is not None:
            out["erm"].append(erm.erm_confidence(X, w_erm))
        done += size
        k += 1
    return {key: np.concatenate(v) for key, v in out.items() if v}


def _run_bayes(data, args):
    res = gamp.run_gamp(data, bayes_probit(data.tau), seed=args.seed)
    if not res.converged:
        raise NumericalFailure(f"GAMP did not converge (final delta {res.final_delta:g})")
    return res


def _run_erm(data, lam):
    sol = erm.minimize(data, lam)
    if sol.status not in ("converged", "diverging-margin"):
        raise NumericalFailure(f"logistic fit ended with status {sol.status}")
    return sol


def _pmap(fn, items, workers):
    """Map in seed order, optionally over a process pool; results keep input order."""
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(args, w: Writer):
    data = probit_model.generate(ModelParams(args.d, args.alpha, args.tau), args.seed)
    with open(w.path("dataset.csv"), "w", newline="\n") as fh:
        fh.write(probit_model.dumps_csv(data))


def cmd_gamp(args, w: Writer):
    data = _dataset(args)
    if args.channel == "bayes":
        ch = bayes_probit(data.tau)
    else:
        ch = logistic_erm(args.lam)
    res = gamp.run_gamp(data, ch, max_iter=args.max_iter, tol=args.tol, damping=args.damping,
                        seed=args.seed)
    d = data.d
    summary = {
        "result": res.to_dict(),
        "overlaps": {"m": float(res.w_hat @ data.w_star / d),
                     "q": float(res.w_hat @ res.w_hat / d),
                     "mean_c": float(np.mean(res.c_hat))},
    }
    if args.channel == "bayes" and args.n_test:
        summary["test_error"] = gamp.bayes_test_error(res, data.w_star, data.tau, args.n_test,
                                                      args.test_seed)
    w.json("gamp.json", summary)
    if not res.converged:
        raise NumericalFailure(f"GAMP did not converge after {res.iterations_used} iterations "
                               f"(final delta {res.final_delta:g})")


def cmd_erm(args, w: Writer):
    data = _dataset(args)
    sol = erm.minimize(data, args.lam, grad_tol=args.grad_tol, max_iter=args.max_iter)
    m, q = erm.overlaps(sol.w_hat, data.w_star)
    summary = {"solution": sol.to_dict(), "overlaps": {"m": m, "q_erm": q}}
    if args.n_test:
        e, l, cf = erm.test_metrics(sol.w_hat, data.w_star, data.tau, args.n_test, args.test_seed)
        summary["test"] = {"error": e, "loss": l, "closed_form_error": cf}
    w.json("erm.json", summary)
    if sol.status == "max-iter" or sol.status == "stalled":
        raise NumericalFailure(f"logistic fit ended with status {sol.status}")


def cmd_se(args, w: Writer):
    cfg = _se_config(args)
    if args.lam is None:
        q = se.solve_bo(args.alpha, args.tau, cfg)
        w.json("se.json", {"q_bo": q, "alpha": args.alpha, "tau": args.tau,
                           "derived": {"bayes_error": se.bayes_error(q, args.tau)}})
        return
    ov = se.solve_erm(args.alpha, args.tau, args.lam, cfg)
    w.json("se.json", {"overlaps": ov.to_dict(), "derived": se.derived_metrics(ov, cfg)})


def _spec_from(args, cfg):
    ov = se.solve_erm(args.alpha, args.tau, args.lam, cfg)
    return ov, unc.JointGaussianSpec.from_se(ov)


def cmd_density(args, w: Writer):
    cfg = _se_config(args)
    if args.pair == "star-bo":
        q = se.solve_bo(args.alpha, args.tau, cfg)
        spec = unc.JointGaussianSpec.from_overlaps(q, 0.0, 1.0, args.tau)
        ov = None
    else:
        ov, spec = _spec_from(args, cfg)
    edges, grid = _density_grid(spec, args.pair, args.grid)
    w.table("density", ("a", "b", "value"), _grid_rows(edges, grid))
    w.json("density.json", {"pair": args.pair, "spec": spec.to_dict(),
                            "overlaps": ov.to_dict() if ov else {"q_bo": spec.q_bo}})
    w.svg("density.svg", svg.heatmap, grid, title=args.pair)


def cmd_calibration(args, w: Writer):
    cfg = _se_config(args)
    ov = se.solve_erm(args.alpha, args.tau, args.lam, cfg)
    p = np.linspace(0.0, 1.0, args.points + 2)[1:-1]
    curve = unc.calibration_curve(p, ov, args.kind)
    w.table("calibration", ("p", "delta"), list(zip(curve.p_grid, curve.delta)))
    w.json("calibration.json", {"kind": args.kind, "overlaps": ov.to_dict()})
    w.svg("calibration.svg", svg.line_plot, [(args.kind, curve.p_grid, curve.delta)],
          title="calibration", xlabel="p", ylabel="delta_p")


def cmd_crossval(args, w: Writer):
    grid = np.geomspace(args.grid_min, args.grid_max, args.grid_points)
    if args.empirical:
        data = _dataset(args)
        sw = crossval.empirical_crossval(data, grid, args.holdout, args.seed,
                                         p_levels=tuple(args.p_levels))
    else:
        sw = crossval.sweep(args.alpha, args.tau, grid, _se_config(args),
                            p_levels=tuple(args.p_levels))
    header = ("lambda", "error", "loss") + tuple(f"delta_{p:g}" for p in sw.p_levels)
    rows = [(l, e, s, *c) for l, e, s, c in zip(sw.lambdas, sw.errors, sw.losses, sw.calibrations)]
    w.table("crossval", header, rows)
    w.json("crossval.json", sw.to_dict())
    w.svg("crossval.svg", svg.line_plot, [("error", sw.lambdas, sw.errors)], logx=True,
          title="test error", xlabel="lambda", ylabel="error")


# ---------------------------------------------------------------------------
# Figure recipes


def _density_panel(w, tag, spec, pair, sim_u, sim_v, bins):
    edges, theory = _density_grid(spec, pair, bins)
    w.table(f"{tag}_theory", ("a", "b", "value"), _grid_rows(edges, theory))
    sim = _hist_grid(sim_u, sim_v, bins)
    w.table(f"{tag}_simulation", ("a", "b", "value"), _grid_rows(edges, sim))
    w.svg(f"{tag}_theory.svg", svg.heatmap, theory, title=f"{tag} theory")
    w.svg(f"{tag}_simulation.svg", svg.heatmap, sim, title=f"{tag} simulation")


def fig_star_bo(w, args, alpha, tau, tag, d):
    q = se.solve_bo(alpha, tau)
    spec = unc.JointGaussianSpec.from_overlaps(q, 0.0, 1.0, tau)
    data = probit_model.generate(ModelParams(d, alpha, tau), args.seed)
    res = _run_bayes(data, args)
    conf = test_confidences(data, args.n_test, args.seed + 1, bayes=res)
    _density_panel(w, tag, spec, "star-bo", conf["star"], conf["bo"], args.bins)
    return {"alpha": alpha, "tau": tau, "q_bo": q, "bayes_error": se.bayes_error(q, tau)}


def figure_fig1(args, w):
    info = fig_star_bo(w, args, 10.0, 0.5, "fig1", args.d or 1000)
    w.json("fig1.json", info)


def figure_fig2(args, w):
    info = []
    for alpha in (0.1, 1.0, 10.0, 100.0):
        for tau in (0.1, 0.5, 2.0):
            tag = f"fig2_a{alpha:g}_t{tau:g}"
            info.append(fig_star_bo(w, args, alpha, tau, tag, args.d or 300))
    w.json("fig2.json", {"panels": info})


def figure_fig3(args, w):
    alpha, tau = 10.0, 0.5
    ov = se.solve_erm(alpha, tau, 0.0)
    spec = unc.JointGaussianSpec.from_se(ov)
    data = probit_model.generate(ModelParams(args.d or 1000, alpha, tau), args.seed)
    res = _run_bayes(data, args)
    sol = _run_erm(data, 0.0)
    conf = test_confidences(data, args.n_test, args.seed + 1, bayes=res, w_erm=sol.w_hat)
    _density_panel(w, "fig3_star_erm", spec, "star-erm", conf["star"], conf["erm"], args.bins)
    _density_panel(w, "fig3_bo_erm", spec, "bo-erm", conf["bo"], conf["erm"], args.bins)
    p = np.linspace(0.01, 0.99, 99)
    w.table("fig3_conditional_mean", ("p", "mean_star", "mean_bo"),
            list(zip(p, p - unc.calibration_erm(p, ov.m, ov.q_erm, tau),
                     p - unc.calibration_erm_vs_bayes(p, ov.m, ov.q_erm, ov.q_bo, tau))))
    w.json("fig3.json", {"overlaps": ov.to_dict(), "erm_error": se.erm_error(ov.m, ov.q_erm, tau)})


def _calibration_trial(job):
    """One repetition: fresh training set, logistic fit, GAMP, binned calibration."""
    alpha, tau, lam, d, seed, n_test, p, half = job
    data = probit_model.generate(ModelParams(d, alpha, tau), seed)
    sol = erm.minimize(data, lam)
    res = gamp.run_gamp(data, bayes_probit(tau), seed=seed)
    conf = test_confidences(data, n_test, seed + 10_000, bayes=res, w_erm=sol.w_hat)
    sel = np.abs(conf["erm"] - p) <= half
    star_d, _ = unc.binned_calibration(conf["erm"], conf["star"], p, half)
    bo_d, _ = unc.binned_calibration(conf["erm"], conf["bo"], p, half)
    var_star = float(np.var(conf["star"][sel])) if sel.any() else float("nan")
    var_bo = float(np.var(conf["bo"][sel])) if sel.any() else float("nan")
    return star_d, bo_d, var_star, var_bo, int(sel.sum()), sol.status


def empirical_calibration(alpha, tau, lam, d, seeds, n_test, p, half=0.01, workers=1):
    """Per-repetition binned (Delta_p, tilde Delta_p, var f_star, var f_bo, count, status)."""
    jobs = [(alpha, tau, lam, d, s, n_test, p, half) for s in seeds]
    return _pmap(_calibration_trial, jobs, workers)


def figure_fig4(args, w):
    tau, p = 2.0, 0.75
    a_c = se.alpha_separability(tau)
    rows = []
    init = None
    # descending alpha with warm starts; the norm blows up as alpha -> alpha_c
    for alpha in np.geomspace(50.0, 0.5, 40):
        if alpha <= a_c:
            # norm-diverging regime: Delta_p = p - 1/2
            rows.append((alpha, p - 0.5, float("nan"), float("nan")))
            continue
        try:
            ov = se.solve_erm(alpha, tau, 0.0, init=init)
        except se.SEError as exc:
            log.warning("skipping alpha=%g: %s", alpha, exc)
            rows.append((alpha, float("nan"), float("nan"), float("nan")))
            init = None
            continue
        init = (ov.m, ov.q_erm, ov.V_erm)
        spec = unc.JointGaussianSpec.from_se(ov)
        rows.append((alpha, float(unc.calibration_erm(p, ov.m, ov.q_erm, tau)),
                     unc.conditional_moments("teacher", p, spec)[1],
                     unc.conditional_moments("bayes", p, spec)[1]))
    rows.reverse()
    w.table("fig4_theory", ("alpha", "delta", "var_star", "var_bo"), rows)
    sim = []
    d = args.d or 300
    for alpha in (3.0, 5.0, 10.0, 30.0):
        seeds = [args.seed + 100 * k for k in range(args.trials)]
        for s, r in zip(seeds, empirical_calibration(alpha, tau, 0.0, d, seeds, args.n_test, p,
                                                     workers=args.workers)):
            sim.append((alpha, s) + tuple(r[:5]))
    w.table("fig4_simulation", ("alpha", "seed", "delta", "delta_bo", "var_star", "var_bo",
                                "count"), sim)
    th = np.array(rows, float)
    w.svg("fig4.svg", svg.line_plot, [("delta_p", th[:, 0], th[:, 1])], logx=True,
          title="calibration at lambda=0", xlabel="alpha", ylabel="delta")
    w.json("fig4.json", {"tau": tau, "p": p, "alpha_c": a_c, "d": d, "trials": args.trials})


def figure_fig5(args, w):
    info = []
    for alpha, tau in ((10.0, 0.5), (5.0, 0.0)):
        sw = crossval.sweep(alpha, tau, p_levels=())
        data = probit_model.generate(ModelParams(args.d or 1000, alpha, tau), args.seed)
        res = _run_bayes(data, args)
        for name, lam in (("error", sw.lambda_error), ("loss", sw.lambda_loss)):
            ov = se.solve_erm(alpha, tau, lam)
            spec = unc.JointGaussianSpec.from_se(ov)
            sol = _run_erm(data, lam)
            conf = test_confidences(data, args.n_test, args.seed + 1, bayes=res, w_erm=sol.w_hat)
            tag = f"fig5_a{alpha:g}_t{tau:g}_{name}"
            _density_panel(w, tag, spec, "bo-erm", conf["bo"], conf["erm"], args.bins)
            info.append({"alpha": alpha, "tau": tau, "which": name, "lambda": lam,
                         "erm_error": se.erm_error(ov.m, ov.q_erm, tau)})
    w.json("fig5.json", {"panels": info})


def figure_fig6(args, w):
    alpha = 5.0
    lams = np.geomspace(1e-4, 1e2, 60)
    rows, marks = [], []
    for tau in (0.0, 0.5, 2.0):
        sw = crossval.sweep(alpha, tau, lams, p_levels=(0.6, 0.9), refine=True)
        marks.append({"tau": tau, "lambda_error": sw.lambda_error, "lambda_loss": sw.lambda_loss})
        for lam, c in zip(sw.lambdas, sw.calibrations):
            rows.append((tau, lam, c[0], c[1]))
    w.table("fig6_theory", ("tau", "lambda", "delta_0.6", "delta_0.9"), rows)
    arr = np.array(rows, float)
    w.svg("fig6.svg", svg.line_plot,
          [(f"tau={t:g} p=0.9", arr[arr[:, 0] == t, 1], arr[arr[:, 0] == t, 3])
           for t in (0.0, 0.5, 2.0)], logx=True, title="calibration vs lambda",
          xlabel="lambda", ylabel="delta")
    w.json("fig6.json", {"alpha": alpha, "optima": marks})


def cmd_figure(args, w: Writer):
    {"fig1": figure_fig1, "fig2": figure_fig2, "fig3": figure_fig3, "fig4": figure_fig4,
     "fig5": figure_fig5, "fig6": figure_fig6}[args.figure_id](args, w)


# ---------------------------------------------------------------------------
# Argument parsing


def _add_data_args(p):
    p.add_argument("--data", help="dataset CSV written by 'generate'")
    p.add_argument("--d", type=int, help="dimension (when generating on the fly)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--data-seed", type=int, default=0)


def _add_se_args(p, lam_required=False):
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=lam_required,
                   default=None if not lam_required else 0.0)
    p.add_argument("--nodes", type=int, default=199, help="Gauss-Hermite order (odd, >= 51)")
    p.add_argument("--tol", dest="tol_se", type=float, default=1e-9)


def build_parser():
    parser = argparse.ArgumentParser(prog="probit-uq", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gamp", parents=[common], help="run message passing on a dataset")
    _add_data_args(p)
    p.add_argument("--channel", choices=("bayes", "erm"), default="bayes")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--damping", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0, help="seed of the random initial mean")
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--test-seed", type=int, default=1)

    p = sub.add_parser("erm", parents=[common], help="direct ridge-logistic fit")
    _add_data_args(p)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--grad-tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--test-seed", type=int, default=1)

    p = sub.add_parser("se", parents=[common], help="solve the asymptotic overlap equations")
    _add_se_args(p)

    p = sub.add_parser("density", parents=[common], help="theoretical 2-d confidence density")
    _add_se_args(p)
    p.add_argument("--pair", choices=unc.PAIRS, default="star-bo")
    p.add_argument("--grid", type=int, default=50, help="bins per axis")

    p = sub.add_parser("calibration", parents=[common], help="calibration curve of the logistic fit")
    _add_se_args(p)
    p.add_argument("--points", type=int, default=99)
    p.add_argument("--kind", choices=("vs-teacher", "vs-bayes"), default="vs-teacher")

    p = sub.add_parser("crossval", parents=[common], help="lambda sweep")
    _add_data_args(p)
    p.add_argument("--grid-min", type=float, default=1e-4)
    p.add_argument("--grid-max", type=float, default=10.0)
    p.add_argument("--grid-points", type=int, default=40)
    p.add_argument("--p-levels", type=float, nargs="*", default=[0.75])
    p.add_argument("--empirical", action="store_true", help="holdout mode on a dataset")
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nodes", type=int, default=199)

    p = sub.add_parser("figure", parents=[common], help="figure reproduction recipes")
    p.add_argument("figure_id", choices=FIGURES)
    p.add_argument("--d", type=int, default=None, help="simulation dimension (recipe default)")
    p.add_argument("--n-test", type=int, default=1_000_000)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def _validate(parser, args):
    if args.command in ("gamp", "erm") or (args.command == "crossval" and args.empirical):
        if not args.data and None in (args.d, args.alpha, args.tau):
            parser.error("give --data or all of --d, --alpha, --tau")
    if args.command == "crossval" and not args.empirical and None in (args.alpha, args.tau):
        parser.error("--alpha and --tau are required for the state-evolution sweep")
    if args.command == "gamp" and args.channel == "erm" and args.lam is None:
        parser.error("--channel erm needs --lambda")
    if args.command == "gamp" and args.channel == "bayes" and args.lam is not None:
        parser.error("--lambda only applies to --channel erm")
    if args.command == "crossval" and not 0 < args.grid_min < args.grid_max:
        parser.error("need 0 < --grid-min < --grid-max")
    if getattr(args, "nodes", 199) < 51 or getattr(args, "nodes", 199) % 2 == 0:
        parser.error("--nodes must be odd and >= 51")


COMMANDS = {"generate": cmd_generate, "gamp": cmd_gamp, "erm": cmd_erm, "se": cmd_se,
            "density": cmd_density, "calibration": cmd_calibration, "crossval": cmd_crossval,
            "figure": cmd_figure}


def _config(args, argv):
    params = {k: v for k, v in vars(args).items()
              if k not in ("out", "format", "verbose", "command", "figure_id")}
    seeds = [v for k, v in params.items() if "seed" in k and v is not None]
    return ExperimentConfig(args.command, params, seeds, args.out, args.format,
                            getattr(args, "figure_id", None), list(argv))


def _strip_out(argv):
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def replay(manifest_path, out_dir):
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        print(f"unsupported manifest schema {manifest.get('schema_version')}", file=sys.stderr)
        return EXIT_USAGE
    argv = manifest["config"]["argv"] + ["--out", out_dir]
    code = main(argv)
    if code != EXIT_OK:
        return code
    mismatched = [name for name, digest in manifest["outputs"].items()
                  if _sha256(os.path.join(out_dir, name)) != digest]
    for name in mismatched:
        print(f"mismatch: {name}", file=sys.stderr)
    print("replay identical" if not mismatched else "replay differs")
    return EXIT_OK if not mismatched else EXIT_NUMERICAL


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "replay":
        return replay(args.manifest, args.out)
    try:
        _validate(parser, args)
    except SystemExit as exc:
        return int(exc.code)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _config(args, _strip_out(argv))
    writer = Writer(args.out, args.format)
    t0 = time.perf_counter()
    try:
        COMMANDS[args.command](args, writer)
    except (NumericalFailure, se.SEError, unc.DensityError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure in {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest = write_manifest(writer, cfg, time.perf_counter() - t0)
    print(json.dumps({"outputs": sorted(manifest["outputs"]), "out": args.out}))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
