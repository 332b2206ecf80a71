"""Command-line entry point ``wfbary``.

Exit codes: 0 success, 1 a solver did not converge, 2 usage or input error.
Machine-readable results go to ``--out`` (a file or directory, depending on
the subcommand) or to standard output; human summaries go to standard error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .barycenter import BarycenterOptions, solve_barycenter
from .basis import BasisSpec, FourierVec, constraint_grid, reconstruct_density
from .bounds import BoundInputs, compute_bounds
from .densities import load_density
from .dual import DualOptions, NonConverged, solve_dual
from .fisher import estimate_fisher, schur_breve
from . import gaussdiag, harness, oracles

log = logging.getLogger("wfbary")

HELP_WIDTH = 88


class UsageError(Exception):
    pass


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, width=HELP_WIDTH)


def _add_basis(p):
    g = p.add_argument_group("basis")
    g.add_argument("--dim", type=int, default=1, help="spatial dimension d")
    g.add_argument("--period", type=float, default=1.0, help="domain period T")
    g.add_argument("--max-freq", type=int, default=8, help="frequencies per axis (p = (2M+1)^d)")


def _add_solver(p):
    g = p.add_argument_group("solver")
    g.add_argument("--epsilon", type=float, default=1e-2, help="regularisation strength")
    g.add_argument("--grid-m", type=int, default=128, help="constraint grid points per axis")
    g.add_argument("--tol-obj", type=float, default=1e-8, help="dual objective tolerance")
    g.add_argument("--tol-feas", type=float, default=1e-7, help="dual feasibility tolerance")
    g.add_argument("--max-iter", type=int, default=5000, help="dual iteration cap")
    g.add_argument("--mode", choices=("intersection", "relaxed"), default="intersection",
                   help="feasible set: grid intersection or single K∘G ellipsoid")


def _add_common(p, out_help="output path (default: standard output)"):
    p.add_argument("--out", default=None, help=out_help)
    p.add_argument("--threads", type=int, default=harness.default_threads(), help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wfbary", formatter_class=_formatter,
                                 description="Regularised W1 distances and barycenters in a Fourier basis.")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("distance", formatter_class=_formatter, help="regularised W1 between two densities")
    p.add_argument("--a", required=True, help="density: grid CSV or JSON family config")
    p.add_argument("--b", required=True, help="density: grid CSV or JSON family config")
    _add_basis(p)
    _add_solver(p)
    _add_common(p)

    p = sub.add_parser("barycenter", formatter_class=_formatter, help="barycenter of a manifest of densities")
    p.add_argument("--manifest", required=True, help="JSON manifest listing the input densities")
    p.add_argument("--method", choices=("newton", "gradient"), default="newton", help="outer method")
    p.add_argument("--max-outer", type=int, default=2000, help="outer iteration cap")
    p.add_argument("--tol-grad", type=float, default=None, help="gradient tolerance (default 1e-6 n)")
    p.add_argument("--samples", type=int, default=256, help="reconstruction points per axis")
    _add_basis(p)
    _add_solver(p)
    _add_common(p, "output directory for theta.csv, density.csv and result.json")

    p = sub.add_parser("fisher", formatter_class=_formatter, help="Fisher matrix at the barycenter")
    p.add_argument("--manifest", required=True, help="JSON manifest listing the input densities")
    p.add_argument("--p-split", type=int, default=None, help="size of the leading block (default q // 2)")
    p.add_argument("--hessian", choices=("fd", "analytic"), default="fd", help="per-measure Hessian method")
    _add_basis(p)
    _add_solver(p)
    _add_common(p, "output directory for D2.csv, D2_breve.csv, eigen.csv and summary.json")

    p = sub.add_parser("bounds", formatter_class=_formatter, help="closed-form bound quantities")
    p.add_argument("--config", default=None, help="JSON file with BoundInputs fields")
    p.add_argument("--n", type=int, default=None, help="number of measures")
    p.add_argument("--p", type=int, default=None, help="dimension")
    p.add_argument("--eps", type=float, default=None, help="regularisation strength")
    p.add_argument("--t", type=float, default=None, help="confidence exponent")
    p.add_argument("--C-Q", dest="C_Q", type=float, default=None, help="density smoothness constant")
    p.add_argument("--lambda-min", type=float, default=None, help="lambda_min(D K∘G D)")
    p.add_argument("--eigs-D", default=None, help="comma-separated eigenvalues of D")
    p.add_argument("--r", type=float, default=None, help="localisation radius")
    _add_common(p)

    for name, hlp in (("diagnose", "Gaussian-approximation diagnostics of one sample"),
                      ("bootstrap", "bootstrap quantiles of the barycenter statistic")):
        p = sub.add_parser(name, formatter_class=_formatter, help=hlp)
        p.add_argument("--manifest", required=True, help="JSON manifest listing the input densities")
        p.add_argument("--p-split", type=int, default=None, help="size of the leading block (default q // 2)")
        p.add_argument("--B", type=int, default=200, help="bootstrap replications")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        if name == "diagnose":
            p.add_argument("--pairs", type=int, default=None, help="Monte-Carlo pairs for mu2/mu3 (default: all)")
        _add_basis(p)
        _add_solver(p)
        _add_common(p)

    p = sub.add_parser("oracle", formatter_class=_formatter, help="closed-form and exact OT oracles")
    osub = p.add_subparsers(dest="oracle", metavar="ORACLE", required=True)
    q = osub.add_parser("ot", formatter_class=_formatter, help="exact W1 between two grid densities")
    q.add_argument("--a", required=True, help="density: grid CSV or JSON family config")
    q.add_argument("--b", required=True, help="density: grid CSV or JSON family config")
    q.add_argument("--cells", type=int, default=256, help="cells for family configs")
    q.add_argument("--periodic", action="store_true", help="torus ground cost")
    q.add_argument("--period", type=float, default=1.0, help="domain period T")
    q.add_argument("--out", default=None, help="output path (default: standard output)")
    q = osub.add_parser("circles", formatter_class=_formatter, help="W2 between uniform measures on circles")
    q.add_argument("--m1", required=True, help="centre (scalar or comma-separated)")
    q.add_argument("--r1", type=float, required=True, help="radius")
    q.add_argument("--m2", required=True, help="centre (scalar or comma-separated)")
    q.add_argument("--r2", type=float, required=True, help="radius")
    q.add_argument("--out", default=None, help="output path (default: standard output)")
    q = osub.add_parser("gauss", formatter_class=_formatter, help="W2 between centred Gaussians")
    q.add_argument("--s1", required=True, help="covariance: scalar or JSON matrix")
    q.add_argument("--s2", required=True, help="covariance: scalar or JSON matrix")
    q.add_argument("--out", default=None, help="output path (default: standard output)")
    q = osub.add_parser("quantile", formatter_class=_formatter, help="W1 between uniform intervals via quantiles")
    q.add_argument("--a", required=True, help="interval lo,hi")
    q.add_argument("--b", required=True, help="interval lo,hi")
    q.add_argument("--quad-points", type=int, default=4096, help="midpoint-rule nodes")
    q.add_argument("--out", default=None, help="output path (default: standard output)")

    p = sub.add_parser("experiment", formatter_class=_formatter, help="Monte-Carlo rate experiment")
    p.add_argument("--config", required=True, help="JSON ExperimentConfig")
    _add_common(p, "output directory (overrides out_dir in the config)")
    return ap


# -- helpers ---------------------------------------------------------------

def _spec(a) -> BasisSpec:
    return BasisSpec(a.dim, a.period, a.max_freq)


def _dual_opts(a) -> DualOptions:
    return DualOptions(a.tol_obj, a.tol_feas, a.max_iter, a.mode)


def _density_arg(text: str, spec: BasisSpec) -> FourierVec:
    path = Path(text)
    if path.suffix.lower() == ".csv":
        if not path.exists():
            raise UsageError(f"file not found: {text}")
        return load_density(str(path), spec)
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError:
        raise UsageError(f"{text!r} is neither a CSV path nor a JSON family config")
    return load_density(cfg, spec)


def _load_manifest(path: str, spec: BasisSpec) -> list:
    mp = Path(path)
    if not mp.exists():
        raise UsageError(f"manifest not found: {path}")
    with open(mp) as fh:
        man = json.load(fh)
    entries = man["densities"] if isinstance(man, dict) else man
    if not entries:
        raise UsageError("manifest lists no densities")
    out = []
    for e in entries:
        if isinstance(e, str) and not Path(e).is_absolute():
            e = str(mp.parent / e)
        elif isinstance(e, dict) and "csv" in e and not Path(e["csv"]).is_absolute():
            e = {**e, "csv": str(mp.parent / e["csv"])}
        out.append(load_density(e, spec))
    return out


def _emit(obj, out: str | None):
    text = json.dumps(harness._jsonable(obj), indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _emit_number(x: float, out: str | None):
    text = repr(float(x)) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _write_matrix(path: Path, M):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(M):
            w.writerow([repr(float(v)) for v in row])


def _barycenter(a, thetas, grid):
    opts = BarycenterOptions(tol_grad=getattr(a, "tol_grad", None), max_outer=getattr(a, "max_outer", 2000),
                             method=getattr(a, "method", "newton"), dual=_dual_opts(a))
    res = solve_barycenter(thetas, a.epsilon, grid, opts)
    if not res.converged:
        raise NonConverged(f"barycenter stopped with |grad| = {res.grad_norm:.3g}", res)
    return res


# -- subcommands -----------------------------------------------------------

def cmd_distance(a):
    spec = _spec(a)
    ta, tb = _density_arg(a.a, spec), _density_arg(a.b, spec)
    sol = solve_dual(ta - tb, a.epsilon, constraint_grid(spec, a.grid_m), _dual_opts(a))
    if not sol.converged:
        raise NonConverged("dual solver did not reach feasibility", sol)
    log.info("feasibility residual %.3g, |(K∘G)^1/2 eta| = %.6f", sol.feasibility_residual, sol.grad_norm_kg)
    _emit_number(sol.value, a.out)


def cmd_barycenter(a):
    spec = _spec(a)
    thetas = _load_manifest(a.manifest, spec)
    res = _barycenter(a, thetas, constraint_grid(spec, a.grid_m))
    record = {"objective": res.objective, "grad_norm": res.grad_norm, "iterations": res.iterations,
              "converged": res.converged, "per_measure_values": list(res.per_measure_values), "n": len(thetas)}
    log.info("objective %.8g after %d iterations", res.objective, res.iterations)
    if a.out is None:
        record["theta"] = list(res.theta_hat.coeffs)
        _emit(record, None)
        return
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "theta.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "coefficient"])
        for k, c in enumerate(res.theta_hat.coeffs):
            w.writerow([k, repr(float(c))])
    pts = spec.grid(a.samples)
    vals = reconstruct_density(res.theta_hat, pts)
    with open(out / "density.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(spec.dim)] + ["value"])
        for x, v in zip(pts, vals):
            w.writerow([repr(float(c)) for c in x] + [repr(float(v))])
    _emit(record, str(out / "result.json"))


def cmd_fisher(a):
    spec = _spec(a)
    grid = constraint_grid(spec, a.grid_m)
    thetas = _load_manifest(a.manifest, spec)
    res = _barycenter(a, thetas, grid)
    F = estimate_fisher(res.theta_hat, thetas, a.epsilon, grid, _dual_opts(a), p_split=a.p_split, method=a.hessian)
    summary = {"lambda_min_DKGD": F.lambda_min_DKGD, "condition": F.condition, "p_split": F.p_split,
               "eigenvalues": list(F.eigvals), "reference": "barycenter of the sample"}
    if a.out is None:
        summary["D2"] = F.D2.tolist()
        _emit(summary, None)
        return
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix(out / "D2.csv", F.D2)
    if F.p_split < F.q:
        _write_matrix(out / "D2_breve.csv", schur_breve(F))
    _write_matrix(out / "eigen.csv", np.column_stack([F.eigvals, F.eigvecs.T]))
    _emit(summary, str(out / "summary.json"))


def cmd_bounds(a):
    fields = {}
    if a.config:
        if not Path(a.config).exists():
            raise UsageError(f"config not found: {a.config}")
        with open(a.config) as fh:
            fields.update(json.load(fh))
    flags = {"n": a.n, "p": a.p, "eps": a.eps, "t": a.t, "C_Q": a.C_Q, "lambda_min_DKGD": a.lambda_min, "r": a.r}
    fields.update({k: v for k, v in flags.items() if v is not None})
    if a.eigs_D is not None:
        fields["eigs_D"] = [float(x) for x in a.eigs_D.split(",")]
    missing = set(BoundInputs.__dataclass_fields__) - set(fields)
    if missing:
        raise UsageError(f"missing bound inputs: {sorted(missing)}")
    _emit(compute_bounds(BoundInputs(**fields)).to_dict(), a.out)


def _sample_fisher(a):
    spec = _spec(a)
    grid = constraint_grid(spec, a.grid_m)
    thetas = _load_manifest(a.manifest, spec)
    res = _barycenter(a, thetas, grid)
    F = estimate_fisher(res.theta_hat, thetas, a.epsilon, grid, _dual_opts(a), p_split=a.p_split)
    return spec, grid, thetas, res, F


def cmd_diagnose(a):
    spec, grid, thetas, res, F = _sample_fisher(a)
    # the sample barycenter stands in for theta*
    scores = gaussdiag.score_vectors(res.theta_hat, thetas, F, F.p_split, a.epsilon, grid, _dual_opts(a))
    mu2, mu3 = gaussdiag.mu_moments(scores, a.pairs, a.seed)
    boot = gaussdiag.bootstrap_region(thetas, res.theta_hat, F, a.B, a.epsilon, grid, a.seed,
                                      opts=BarycenterOptions(dual=_dual_opts(a)))
    znorm = gaussdiag.gaussian_reference(scores.sigma, 20000, a.seed)
    z0 = float(np.median(znorm))
    ca = gaussdiag.anticoncentration(scores.sigma, z0, 0.1 * float(np.std(znorm)), 20000, a.seed) if z0 > 0 else 0.0
    report = {"mu2": mu2, "mu3": mu3, "c_a": ca, "ks_bootstrap_vs_gaussian": gaussdiag.ks_distance(boot.stats, znorm)
              if boot.stats.size else None, "bootstrap_quantiles": boot.quantiles, "failures": boot.failures,
              "seed": a.seed, "p_split": F.p_split, "n": len(thetas), "lambda_min_DKGD": F.lambda_min_DKGD}
    _emit(report, a.out)


def cmd_bootstrap(a):
    spec, grid, thetas, res, F = _sample_fisher(a)
    boot = gaussdiag.bootstrap_region(thetas, res.theta_hat, F, a.B, a.epsilon, grid, a.seed,
                                      opts=BarycenterOptions(dual=_dual_opts(a)))
    _emit({"quantiles": boot.quantiles, "failures": boot.failures, "B": a.B, "seed": a.seed}, a.out)


def _vector(text: str):
    try:
        return np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise UsageError(f"not a number list: {text!r}")


def _matrix(text: str):
    try:
        return np.atleast_2d(np.asarray(json.loads(text), dtype=float))
    except (json.JSONDecodeError, ValueError, TypeError):
        raise UsageError(f"not a scalar or JSON matrix: {text!r}")


def cmd_oracle(a):
    if a.oracle == "circles":
        m1, m2 = _vector(a.m1), _vector(a.m2)
        if m1.size != m2.size:
            raise UsageError("centres have different dimensions")
        _emit_number(oracles.circles_w2(m1, a.r1, m2, a.r2), a.out)
    elif a.oracle == "gauss":
        _emit_number(oracles.gaussian_w2(_matrix(a.s1), _matrix(a.s2)), a.out)
    elif a.oracle == "quantile":
        lo_a, hi_a = _vector(a.a)
        lo_b, hi_b = _vector(a.b)
        val = oracles.quantile_w1_1d(lambda s: lo_a + s * (hi_a - lo_a), lambda s: lo_b + s * (hi_b - lo_b),
                                     a.quad_points)
        _emit_number(val, a.out)
    else:
        ma, mb = _oracle_measure(a.a, a), _oracle_measure(a.b, a)
        _emit_number(oracles.discrete_ot_w1(ma, mb, a.period if a.periodic else None), a.out)


def _oracle_measure(text, a):
    path = Path(text)
    if path.suffix.lower() == ".csv":
        if not path.exists():
            raise UsageError(f"file not found: {text}")
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return oracles.DiscreteMeasure.normalized(arr[:, :-1], arr[:, -1])
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError:
        raise UsageError(f"{text!r} is neither a CSV path nor a JSON family config")
    from .densities import from_config
    return oracles.grid_measure(from_config(cfg, a.period, 1), a.cells)


def cmd_experiment(a):
    cp = Path(a.config)
    if not cp.exists():
        raise UsageError(f"config not found: {a.config}")
    try:
        cfg = harness.ExperimentConfig.from_json(cp)
    except (json.JSONDecodeError, TypeError) as e:
        raise UsageError(f"bad config {a.config}: {e}")
    over = {"threads": a.threads}
    if a.out:
        over["out_dir"] = a.out
    cfg = harness.ExperimentConfig.from_dict({**cfg.to_dict(), **over})

    def progress(p, n, cell):
        log.info("p=%d n=%d ks=%.4f median ratio=%.4f", p, n, cell["ks_norm"], cell["median_ratio"])

    report = harness.run_experiment(cfg, progress)
    if not cfg.out_dir:
        _emit(report.to_dict(), None)
    if not report.valid:
        log.error("experiment marked invalid: %d failed replications", report.failures)
        return 1
    return 0


COMMANDS = {"distance": cmd_distance, "barycenter": cmd_barycenter, "fisher": cmd_fisher, "bounds": cmd_bounds,
            "diagnose": cmd_diagnose, "bootstrap": cmd_bootstrap, "oracle": cmd_oracle, "experiment": cmd_experiment}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    logging.basicConfig(level=logging.INFO if getattr(a, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        rc = COMMANDS[a.command](a)
        return int(rc or 0)
    except NonConverged as e:
        print(f"wfbary: not converged: {e}", file=sys.stderr)
        return 1
    except (UsageError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError, np.linalg.LinAlgError) as e:
        print(f"wfbary: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
