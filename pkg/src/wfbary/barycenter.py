"""Fourier-parametrised barycenter: argmin_theta L(theta) = sum_i l(theta - theta_i).

Only the constant (mass) mode is pinned; nonnegativity of the reconstructed
density is not enforced.  Two outer methods share the same oracle (the dual
maximisers eta_i, which are the per-measure gradients):

* ``newton`` (default): L is convex and piecewise quadratic, with Hessian
  sum_i (K∘G)^(-1/2) P_i (K∘G)^(-1/2) / (2 eps) on the current active faces.
  Damped Newton steps with an Armijo backtracking line search.
* ``gradient``: plain gradient descent with backtracking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import ConstraintGrid, FourierVec, gram_operator
from .densities import stack
from .dual import DualOptions, NonConverged, hessian_active, solve_dual

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BarycenterOptions:
    tol_grad: float | None = None  # default 1e-6 * n
    max_outer: int = 2000
    method: str = "newton"
    dual: DualOptions = field(default_factory=DualOptions)

    def __post_init__(self):
        if self.method not in ("newton", "gradient"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True)
class BarycenterResult:
    theta_hat: FourierVec
    objective: float
    grad_norm: float
    iterations: int
    per_measure_values: tuple
    converged: bool = True
    history: tuple = field(default=(), repr=False)


class _Model:
    def __init__(self, X: np.ndarray, eps: float, grid: ConstraintGrid, opts: DualOptions):
        self.X = X
        self.eps = eps
        self.grid = grid
        self.opts = opts
        self.free = np.flatnonzero(grid.spec.free_mask)
        self.evals = 0

    def solve_all(self, theta: np.ndarray):
        sols = []
        for x in self.X:
            d = theta - x
            d[0] = 0.0
            s = solve_dual(d, self.eps, self.grid, self.opts)
            if not s.converged:
                raise NonConverged(f"inner dual solve failed at measure {len(sols)}", s)
            sols.append(s)
        self.evals += 1
        return sols

    def value(self, theta):
        return sum(s.value for s in self.solve_all(theta))


def objective(theta: FourierVec, thetas: Sequence[FourierVec], eps: float, grid: ConstraintGrid,
              opts: DualOptions = DualOptions()) -> float:
    """L(theta) = sum_i l(theta - theta_i)."""
    X = stack(thetas)
    if theta.spec != thetas[0].spec:
        raise ValueError("theta and the inputs use different bases")
    return _Model(X, eps, grid, opts).value(theta.coeffs.copy())


def _grad(sols, free):
    g = np.sum([s.eta for s in sols], axis=0)
    return g[free]


def solve_barycenter(thetas: Sequence[FourierVec], eps: float, grid: ConstraintGrid,
                     opts: BarycenterOptions = BarycenterOptions(),
                     theta_init: FourierVec | None = None) -> BarycenterResult:
    X = stack(thetas)
    spec = thetas[0].spec
    if grid.spec != spec:
        raise ValueError("grid and measures use different bases")
    masses = X[:, 0]
    if np.ptp(masses) > 1e-8:
        raise ValueError("input measures have different masses")
    n = X.shape[0]
    tol = opts.tol_grad if opts.tol_grad is not None else 1e-6 * n
    model = _Model(X, eps, grid, opts.dual)
    free = model.free

    theta = X.mean(axis=0) if theta_init is None else np.array(theta_init.coeffs, dtype=float)
    theta[0] = masses[0]
    # minimisers of L lie in the convex hull of the inputs' free coordinates
    center = X[:, free].mean(axis=0)
    radius = np.max(np.linalg.norm(X[:, free] - center, axis=1)) + 1e-12

    sols = model.solve_all(theta)
    f = sum(s.value for s in sols)
    g = _grad(sols, free)
    hist = [f]
    it = 0
    converged = np.linalg.norm(g) <= tol
    step = None
    while not converged and it < opts.max_outer:
        it += 1
        if opts.method == "newton":
            H = sum(hessian_active(s, grid) for s in sols)[np.ix_(free, free)]
            direction = _newton_direction(H, g)
            cap = radius + np.linalg.norm(theta[free] - center)
            nd = np.linalg.norm(direction)
            if nd > cap:
                direction *= cap / nd
        elif opts.method == "gradient":
            direction = -g
        else:
            raise ValueError(f"unknown method {opts.method!r}")
        slope = g @ direction
        if slope >= 0:
            direction, slope = -g, -(g @ g)
        t = 1.0 if opts.method == "newton" or step is None else min(1.0, 2.0 * step)
        if opts.method == "gradient" and step is None:
            t = 1.0 / _curvature_bound(model)
        accepted = False
        for _ in range(60):
            trial = theta.copy()
            trial[free] += t * direction
            tsols = model.solve_all(trial)
            ft = sum(s.value for s in tsols)
            if ft <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no decrease to machine precision: we are at the minimum up to rounding
            log.debug("line search stalled at |g|=%.3g", np.linalg.norm(g))
            break
        step = t
        theta, sols, f = trial, tsols, ft
        g = _grad(sols, free)
        hist.append(f)
        converged = np.linalg.norm(g) <= tol
    gn = float(np.linalg.norm(g))
    if not converged:
        converged = gn <= tol
    if not converged:
        log.warning("barycenter stopped after %d iterations with |grad|=%.3g (tol %.3g)", it, gn, tol)
    return BarycenterResult(
        FourierVec(theta, spec), float(f), gn, it,
        tuple(float(s.value) for s in sols), bool(converged), tuple(hist),
    )


def _newton_direction(H, g):
    scale = max(np.trace(H) / H.shape[0], 1e-300)
    lam = 1e-10 * scale
    for _ in range(12):
        try:
            c = np.linalg.cholesky(H + lam * np.eye(H.shape[0]))
            y = np.linalg.solve(c, -g)
            return np.linalg.solve(c.T, y)
        except np.linalg.LinAlgError:
            lam *= 100.0
    return -g / scale


def _curvature_bound(model: _Model) -> float:
    # each l has Hessian <= (K∘G)^-1 / (2 eps)
    kd = np.diag(gram_operator(model.grid.spec).matrix)[model.free]
    return model.X.shape[0] / (2.0 * model.eps * kd.min())
