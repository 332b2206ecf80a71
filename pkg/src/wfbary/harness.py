"""Monte-Carlo experiments: sample measure families, solve barycenters,
compare the linearised statistic with its Gaussian limit, fit rates in n.

For every cell (p, n) the population quantities are computed once:

* theta*: analytic (symmetric families) or a barycenter of a large
  calibration sample;
* D^2 = n E[H(theta* - theta)] from ``fisher_samples`` calibration draws;
* Var[D̆^{-1} ∇̆ L(theta*)] = n Cov(X) from the same draws.

Each replication draws n measures with its own seed derived from
(seed, p, n, replication), so serial and parallel runs agree.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .barycenter import BarycenterOptions, solve_barycenter
from .basis import BasisSpec, FourierVec, constraint_grid
from .bounds import BoundInputs, compute_bounds
from .densities import TrigPerturbed1D, Uniform1D, WrappedGaussian1D, coefficients
from .dual import DualOptions, NonConverged, solve_dual
from .fisher import FisherEstimate, breve_grad, from_matrix, per_measure_hessians, schur_breve, sym_sqrt
from .gaussdiag import ScoreSet, gaussian_draws, ks_distance, mu_moments, sliced_w1, anticoncentration

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_FAILURE_RATE = 0.05
REFERENCE_STREAM = 2**31 - 1  # seed slot for the Gaussian reference draws
EXECUTION_FIELDS = ("threads", "out_dir")  # do not affect results, so not echoed into reports


# -- families --------------------------------------------------------------

class Family:
    name = ""
    symmetric = False

    def __init__(self, **params):
        self.params = params

    def sample(self, rng: np.random.Generator, n: int, spec: BasisSpec) -> list:
        raise NotImplementedError

    def theta_star(self, spec: BasisSpec) -> FourierVec:
        raise ValueError(f"family {self.name} has no analytic theta*")


class UniformIntervals(Family):
    """F1: uniform on [c - w/2, c + w/2], c ~ U[center +- spread], w ~ U[width]."""

    name = "F1"

    def sample(self, rng, n, spec):
        c0 = self.params.get("center", 0.5)
        sp = self.params.get("spread", 0.1)
        lo, hi = self.params.get("width", (0.2, 0.4))
        c = rng.uniform(c0 - sp, c0 + sp, n)
        w = rng.uniform(lo, hi, n)
        return [coefficients(Uniform1D(ci - wi / 2, wi, spec.period), spec) for ci, wi in zip(c, w)]


class TrigPerturbed(Family):
    """F2: uniform plus a random trig perturbation, symmetric about the uniform.

    Frequency k has scale ``amplitude / k**decay`` (defaults 0.12 and 1, valid
    up to max_freq = 8), and only the first ``n_freq`` frequencies are
    perturbed (all when None).  ``law`` picks the coefficient distribution:

    - ``scale`` (default): uniform on [-a, a] times one shared amplitude
      U**``scale_power``, a scale mixture whose departure from normality grows
      with the dimension.
    - ``uniform``: independent uniforms on [-a, a].
    - ``intermittent``: the whole perturbation is switched on with probability
      ``activation``.
    - ``phase``: frequency k gets radius a_k U[0, 1] and all frequencies share
      one uniform random shift, so the density is a randomly rotated profile.

    Every law is invariant under a symmetry that fixes only the uniform
    density (reflection through it, or rotation of the circle), so theta* is
    the uniform density.
    """

    name = "F2"
    symmetric = True

    def scales(self, spec):
        A = self.params.get("amplitude", 0.12)
        k = self.params.get("n_freq") or spec.max_freq
        k = min(k, spec.max_freq)
        a = A / np.arange(1, k + 1) ** self.params.get("decay", 1.0)
        a = np.repeat(a, 2)
        if np.sqrt(2.0) * a.sum() >= 1.0:
            raise ValueError("perturbation too large for a positive density")
        return a

    def sample(self, rng, n, spec):
        a = self.scales(spec)
        law = self.params.get("law", "scale")
        if law == "uniform":
            amps = rng.uniform(-1.0, 1.0, (n, a.size)) * a
        elif law == "intermittent":
            on = rng.random((n, 1)) < self.params.get("activation", 0.2)
            amps = np.where(on, rng.uniform(-1.0, 1.0, (n, a.size)), 0.0) * a
        elif law == "scale":
            s = rng.uniform(0.0, 1.0, (n, 1)) ** self.params.get("scale_power", 3.0)
            amps = s * rng.uniform(-1.0, 1.0, (n, a.size)) * a
        elif law == "phase":
            r = rng.uniform(0.0, 1.0, (n, a.size // 2)) * a[0::2]
            shift = rng.uniform(0.0, 2 * np.pi, (n, 1)) * np.arange(1, a.size // 2 + 1)
            amps = np.empty((n, a.size))
            amps[:, 0::2], amps[:, 1::2] = r * np.cos(shift), r * np.sin(shift)
        else:
            raise ValueError(f"unknown law {law!r}")
        return [coefficients(TrigPerturbed1D(tuple(r), spec.period), spec) for r in amps]

    def theta_star(self, spec):
        return FourierVec(np.eye(spec.p)[0], spec)


class WrappedGaussians(Family):
    """F3: wrapped Gaussians, location uniform on the circle, sigma ~ U[sigma].

    Rotation invariance makes the uniform density the population barycenter.
    """

    name = "F3"
    symmetric = True

    def sample(self, rng, n, spec):
        lo, hi = self.params.get("sigma", (0.05, 0.15))
        mu = rng.uniform(0.0, spec.period, n)
        s = rng.uniform(lo, hi, n)
        return [coefficients(WrappedGaussian1D(m, si, spec.period), spec) for m, si in zip(mu, s)]

    def theta_star(self, spec):
        return FourierVec(np.eye(spec.p)[0], spec)


class Identical(Family):
    """Degenerate family: every draw is the same uniform arc."""

    name = "identical"
    symmetric = True

    def sample(self, rng, n, spec):
        th = self.theta_star(spec)
        return [th] * n

    def theta_star(self, spec):
        return coefficients(Uniform1D(self.params.get("start", 0.2), self.params.get("width", 0.4), spec.period), spec)


FAMILIES = {c.name: c for c in (UniformIntervals, TrigPerturbed, WrappedGaussians, Identical)}


def make_family(cfg: dict) -> Family:
    cfg = dict(cfg)
    name = cfg.pop("name")
    if name not in FAMILIES:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}")
    return FAMILIES[name](**cfg)


# -- config ----------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    family: dict = field(default_factory=lambda: {"name": "F2"})
    n_list: tuple = (8, 16, 32, 64)
    p_list: tuple = (9,)
    replications: int = 300
    eps: float = 1e-2
    grid_m: int = 128
    tol_grad: float | None = None
    seed: int = 0
    theta_star_mode: str = "analytic"
    calibration_factor: int = 50
    fisher_samples: int = 2000
    fisher_method: str = "fd"
    p_split: int | None = None
    t: float = 2.0
    C_Q: float = 0.0
    r: float | None = None
    n_draws: int = 20000
    n_boot_ci: int = 200
    out_dir: str | None = None
    threads: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))
        object.__setattr__(self, "p_list", tuple(int(p) for p in self.p_list))
        if not self.n_list or not self.p_list:
            raise ValueError("n_list and p_list must be nonempty")
        if any(p < 3 or p % 2 == 0 for p in self.p_list):
            raise ValueError("1D real-trig p must be odd and >= 3")
        if min(self.n_list) < 2:
            raise ValueError("every n must be at least 2")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if self.theta_star_mode not in ("analytic", "calibration"):
            raise ValueError("theta_star_mode must be analytic or calibration")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        make_family(self.family)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_list"], d["p_list"] = list(self.n_list), list(self.p_list)
        return d


# -- rate fitting ----------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    ci: tuple
    xs: tuple
    ys: tuple
    ci_points: tuple
    excluded: int
    defined: bool


def fit_rate(records: Sequence[dict], x_key: str, y_key: str, stat: Callable | None = None,
             n_boot: int = 200, level: float = 0.9, seed: int = 0) -> RateFit:
    """OLS of log(cell statistic) on log(x), CI by resampling records within cells.

    ``stat(x, ys)`` maps one cell's y values to its statistic (default: median
    of the positive values).  Nonpositive values are excluded and counted.
    """
    groups: dict = {}
    for r in records:
        groups.setdefault(float(r[x_key]), []).append(float(r[y_key]))
    xs = sorted(groups)
    excluded = 0
    custom = stat is not None
    if not custom:
        for x in xs:
            ys = np.asarray(groups[x])
            excluded += int(np.sum(~(ys > 0)))
            groups[x] = ys[ys > 0]

        def stat(x, ys):
            return float(np.median(ys)) if ys.size else 0.0
    else:
        groups = {x: np.asarray(v) for x, v in groups.items()}

    def cells(gs):
        return np.array([stat(x, gs[x]) for x in xs])

    def ols(vals):
        ok = vals > 0
        if np.sum(ok) < 3:
            return np.nan, np.nan
        lx, ly = np.log(np.asarray(xs)[ok]), np.log(vals[ok])
        A = np.stack([lx, np.ones_like(lx)], axis=1)
        (b, a), *_ = np.linalg.lstsq(A, ly, rcond=None)
        return float(b), float(a)

    vals = cells(groups)
    if custom:
        excluded += int(np.sum(~(vals > 0)))
    slope, intercept = ols(vals)
    defined = bool(np.isfinite(slope)) and len(xs) >= 3
    rng = np.random.default_rng(seed)
    boot_slopes, boot_cells = [], []
    for _ in range(n_boot if defined else 0):
        gs = {x: g[rng.integers(0, g.size, g.size)] if g.size else g for x, g in groups.items()}
        bc = cells(gs)
        boot_cells.append(bc)
        s, _ = ols(bc)
        if np.isfinite(s):
            boot_slopes.append(s)
    a = 0.5 * (1.0 - level)
    if boot_slopes:
        ci = (float(np.quantile(boot_slopes, a)), float(np.quantile(boot_slopes, 1 - a)))
        bc = np.array(boot_cells)
        ci_points = tuple((float(np.quantile(c, a)), float(np.quantile(c, 1 - a))) for c in bc.T)
    else:
        ci = (np.nan, np.nan)
        ci_points = tuple((np.nan, np.nan) for _ in xs)
    return RateFit(slope, intercept, ci, tuple(xs), tuple(float(v) for v in vals), ci_points, excluded, defined)


# -- experiment ------------------------------------------------------------

@dataclass
class _Cell:
    """Population quantities shared by the replications of one (p, n) cell."""

    spec: BasisSpec
    grid: object
    theta_star: FourierVec
    F: FisherEstimate
    D_breve: np.ndarray
    D_breve_inv: np.ndarray
    sigma: np.ndarray
    cal_scores: np.ndarray
    p_split: int


@dataclass(frozen=True)
class RateReport:
    cells: tuple
    fits: dict
    valid: bool
    failures: int
    config: dict

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "valid": self.valid, "failures": self.failures,
                "cells": list(self.cells), "fits": self.fits, "config": self.config}


RECORD_FIELDS = ("p", "n", "replication", "seed", "stat_norm", "score_norm", "residual_norm", "ratio",
                 "full_stat_norm", "full_score_norm", "full_residual_norm", "iterations", "grad_norm")


def replication_seed(seed: int, p: int, n: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, p, n, rep]).generate_state(1)[0])


def _free_grads(theta: FourierVec, thetas, eps, grid, opts: DualOptions) -> np.ndarray:
    out = np.empty((len(thetas), theta.spec.p - 1))
    for i, t in enumerate(thetas):
        d = theta.coeffs - t.coeffs
        d[0] = 0.0
        s = solve_dual(d, eps, grid, opts)
        if not s.converged:
            raise NonConverged(f"dual solve failed at measure {i}", s)
        out[i] = s.eta[1:]
    return out


def _prepare_p(cfg: ExperimentConfig, family: Family, p: int):
    spec = BasisSpec(1, 1.0, (p - 1) // 2)
    grid = constraint_grid(spec, cfg.grid_m)
    opts = DualOptions()
    if cfg.theta_star_mode == "analytic":
        theta_star = family.theta_star(spec)
    else:
        rng = np.random.default_rng([cfg.seed, p, 1])
        cal = family.sample(rng, cfg.calibration_factor * max(cfg.n_list), spec)
        theta_star = solve_barycenter(cal, cfg.eps, grid, _bary_opts(cfg)).theta_hat
    rng = np.random.default_rng([cfg.seed, p, 2])
    cal = family.sample(rng, cfg.fisher_samples, spec)
    H = per_measure_hessians(theta_star, cal, cfg.eps, grid, opts, cfg.fisher_method).mean(axis=0)
    grads = _free_grads(theta_star, cal, cfg.eps, grid, opts)
    return spec, grid, theta_star, H, grads


def _bary_opts(cfg: ExperimentConfig) -> BarycenterOptions:
    return BarycenterOptions(tol_grad=cfg.tol_grad)


def _make_cell(cfg, spec, grid, theta_star, H, grads, n) -> _Cell:
    q = spec.p - 1
    p_split = cfg.p_split if cfg.p_split is not None else q // 2
    F = from_matrix(n * H, spec, p_split)
    if p_split < q:
        Sb = schur_breve(F, p_split)
        Db, Dbi = sym_sqrt(Sb), sym_sqrt(Sb, inverse=True)
        X = breve_grad(grads, F, p_split) @ Dbi
    else:
        Db, Dbi = F.D, F.D_inv
        X = grads @ F.D_inv
    sigma = n * np.cov(X, rowvar=False, bias=True)
    return _Cell(spec, grid, theta_star, F, Db, Dbi, np.atleast_2d(sigma), X, p_split)


def _replicate(cfg: ExperimentConfig, family: Family, cell: _Cell, p: int, n: int, rep: int):
    seed = replication_seed(cfg.seed, p, n, rep)
    rng = np.random.default_rng(seed)
    thetas = family.sample(rng, n, cell.spec)
    try:
        res = solve_barycenter(thetas, cfg.eps, cell.grid, _bary_opts(cfg))
        if not res.converged:
            return None
        g = _free_grads(cell.theta_star, thetas, cfg.eps, cell.grid, DualOptions()).sum(axis=0)
    except NonConverged:
        return None
    F, k = cell.F, cell.p_split
    delta = res.theta_hat.coeffs[1:] - cell.theta_star.coeffs[1:]
    full_stat = F.D @ delta
    full_score = F.D_inv @ g
    if k < F.q:
        stat = cell.D_breve @ delta[:k]
        score = cell.D_breve_inv @ breve_grad(g, F, k)
    else:
        stat, score = full_stat, full_score
    # minimisation: theta_hat - theta* ~ -D^{-2} grad L(theta*), so the residual adds the score
    resid = np.linalg.norm(stat + score)
    sn = np.linalg.norm(score)
    row = {
        "p": p, "n": n, "replication": rep, "seed": seed,
        "stat_norm": float(np.linalg.norm(stat)),
        "score_norm": float(sn),
        "residual_norm": float(resid),
        "ratio": float(resid / sn) if sn > 0 else 0.0,
        "full_stat_norm": float(np.linalg.norm(full_stat)),
        "full_score_norm": float(np.linalg.norm(full_score)),
        "full_residual_norm": float(np.linalg.norm(full_stat + full_score)),
        "iterations": res.iterations,
        "grad_norm": res.grad_norm,
    }
    return row, stat


_WORKER: dict = {}


def _worker_run(rep):
    w = _WORKER
    return _replicate(w["cfg"], w["family"], w["cell"], w["p"], w["n"], rep)


def _run_reps(cfg, family, cell, p, n, threads):
    reps = range(cfg.replications)
    if threads <= 1:
        return [_replicate(cfg, family, cell, p, n, r) for r in reps]
    _WORKER.update(cfg=cfg, family=family, cell=cell, p=p, n=n)
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(_worker_run, reps, chunksize=max(1, cfg.replications // (4 * threads))))


def run_experiment(cfg: ExperimentConfig, progress: Callable | None = None) -> RateReport:
    """Run every (p, n) cell, write reports to ``cfg.out_dir`` (if set) and return the summary."""
    family = make_family(cfg.family)
    if cfg.theta_star_mode == "analytic" and not family.symmetric:
        raise ValueError(f"family {family.name} needs theta_star_mode = calibration")
    records, cells, bounds = [], [], []
    stats_by_cell: dict = {}
    ref_norms: dict = {}
    total_fail = 0
    for p in cfg.p_list:
        spec, grid, theta_star, H, grads = _prepare_p(cfg, family, p)
        for n in cfg.n_list:
            cell = _make_cell(cfg, spec, grid, theta_star, H, grads, n)
            out = _run_reps(cfg, family, cell, p, n, cfg.threads)
            ok = [o for o in out if o is not None]
            fails = len(out) - len(ok)
            total_fail += fails
            rows = [o[0] for o in ok]
            svec = np.array([o[1] for o in ok]).reshape(len(ok), -1)
            records.extend(rows)
            stats_by_cell[(p, n)] = svec
            zseed = replication_seed(cfg.seed, p, n, REFERENCE_STREAM)
            Z = gaussian_draws(cell.sigma, cfg.n_draws, zseed)
            znorm = np.linalg.norm(Z, axis=1)
            ref_norms[(p, n)] = znorm
            snorm = np.array([r["stat_norm"] for r in rows])
            ks = ks_distance(snorm, znorm) if rows else float("nan")
            scores = ScoreSet.from_samples(cell.cal_scores, n_sum=n)
            mu2, mu3 = mu_moments(scores, resample_pairs=20000, rng_seed=zseed)
            z0 = float(np.median(znorm))
            ca = anticoncentration(cell.sigma, z0, 0.1 * float(np.std(znorm)), cfg.n_draws, zseed) if z0 > 0 else 0.0
            r_hits = float(np.mean([r["full_stat_norm"] <= 4 * r["full_score_norm"] + 1e-12 for r in rows])) if rows else float("nan")
            cells.append({
                "p": p, "n": n, "records": len(rows), "failures": fails,
                "median_stat_norm": float(np.median(snorm)) if rows else float("nan"),
                "median_ratio": float(np.median([r["ratio"] for r in rows])) if rows else float("nan"),
                "ks_norm": ks,
                "w1_proj": sliced_w1(svec, Z, 16, zseed) if rows and svec.shape[1] else float("nan"),
                "mu2": mu2, "mu3": mu3, "c_a": ca,
                "lambda_min_DKGD": cell.F.lambda_min_DKGD,
                "fisher_condition": cell.F.condition,
                "r_bound_hit_rate": r_hits,
                "reference_seed": zseed,
            })
            r_val = cfg.r if cfg.r is not None else float(np.median([4 * r["full_score_norm"] for r in rows] or [1.0]))
            rep_b = compute_bounds(BoundInputs(n, spec.p, cfg.eps, cfg.t, cfg.C_Q, cell.F.lambda_min_DKGD,
                                               tuple(cell.F.eig_D), max(r_val, 1e-300)))
            bd = rep_b.to_dict()
            bd.update(p_cell=p, n_cell=n, theta_star_estimated=cfg.theta_star_mode != "analytic")
            bounds.append(bd)
            if progress:
                progress(p, n, cells[-1])

    fits = {}
    for p in cfg.p_list:
        recs = [r for r in records if r["p"] == p]
        ks_fit = fit_rate(recs, "n", "stat_norm",
                          stat=lambda x, ys, p=p: ks_distance(ys, ref_norms[(p, int(x))]) if ys.size else 0.0,
                          n_boot=cfg.n_boot_ci, seed=cfg.seed)
        ratio_fit = fit_rate(recs, "n", "ratio", n_boot=cfg.n_boot_ci, seed=cfg.seed)
        fits[f"p{p}"] = {"ks_vs_n": _fit_dict(ks_fit), "ratio_vs_n": _fit_dict(ratio_fit)}
    n_total = cfg.replications * len(cfg.n_list) * len(cfg.p_list)
    valid = total_fail <= MAX_FAILURE_RATE * n_total
    if not valid:
        log.error("experiment invalid: %d of %d replications failed", total_fail, n_total)
    echoed = {k: v for k, v in cfg.to_dict().items() if k not in EXECUTION_FIELDS}
    report = RateReport(tuple(cells), fits, bool(valid), int(total_fail), echoed)
    if cfg.out_dir:
        write_reports(report, records, bounds, Path(cfg.out_dir))
    return report


def _fit_dict(f: RateFit) -> dict:
    return {"slope": f.slope, "intercept": f.intercept, "ci": list(f.ci), "defined": f.defined,
            "excluded": f.excluded, "x": list(f.xs), "y": list(f.ys), "ci_points": [list(c) for c in f.ci_points]}


def _num(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_reports(report: RateReport, records: list, bounds: list, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(records, key=lambda r: (r["p"], r["n"], r["replication"]))
    with open(out / "records.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in rows:
            w.writerow([_num(r[k]) for k in RECORD_FIELDS])
    with open(out / "rates.json", "w") as fh:
        json.dump(_jsonable(report.to_dict()), fh, indent=2, sort_keys=True)
    with open(out / "bounds.json", "w") as fh:
        json.dump(_jsonable(bounds), fh, indent=2, sort_keys=True)
    for key, fits in report.fits.items():
        for name, f in fits.items():
            with open(out / f"plot_{name}_{key}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["x", "y", "ci_lo", "ci_hi"])
                for x, y, (lo, hi) in zip(f["x"], f["y"], f["ci_points"]):
                    w.writerow([_num(x), _num(y), _num(lo), _num(hi)])


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if np.isfinite(f) else None
    if isinstance(o, np.integer):
        return int(o)
    return o


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
