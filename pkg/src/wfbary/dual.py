"""Regularized W1 in Fourier coordinates as a support-function problem.

    l(delta) = max_{eta in C} <eta, delta> - eps * eta^T (K∘G) eta,
    C = {eta : |J_j eta| <= 1 for every grid point x_j}.

K∘G is diagonal and vanishes only on the constant mode, which is dropped
(``delta`` pairs equal masses).  In whitened coordinates ``z = (K∘G)^(1/2) eta``
the objective is ``<z, b> - eps |z|^2`` with ``b = (K∘G)^(-1/2) delta``, so one
projected-gradient step of length 1/(2 eps) from any point lands on the
maximiser

    z* = Proj_{C'}(b / (2 eps)),   C' = {z : |A_j z| <= 1},  A_j = J_j (K∘G)^(-1/2).

The projection onto the intersection is computed by an exact active-set QP
on 1D grids, where every constraint is a slab.  In higher dimension each
constraint is an ellipsoidal cylinder; the default there is a cutting-plane
loop (QP over tangent cuts of the violated cylinders until the worst
violation is below tolerance), with Dykstra's cyclic projections available
as a slower alternative.
By the envelope theorem the gradient of ``l`` is ``eta*``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import quadprog
from scipy.optimize import nnls

from .basis import ConstraintGrid, FourierVec, gram_operator

log = logging.getLogger(__name__)

MODES = ("intersection", "relaxed")
PROJECTORS = ("auto", "active-set", "cutting-plane", "dykstra")


class NonConverged(RuntimeError):
    """A solver hit its iteration cap; ``result`` holds the last iterate."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@dataclass(frozen=True)
class DualOptions:
    tol_obj: float = 1e-8
    tol_feas: float = 1e-7
    max_iter: int = 5000
    mode: str = "intersection"
    projector: str = "auto"  # auto | active-set | cutting-plane | dykstra

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.projector not in PROJECTORS:
            raise ValueError(f"projector must be one of {PROJECTORS}")


@dataclass(frozen=True)
class DualSolution:
    eta: np.ndarray
    value: float
    iterations: int
    feasibility_residual: float
    grad_norm_kg: float
    converged: bool = True
    epsilon: float = 0.0
    active: tuple = field(default=(), repr=False)
    target: np.ndarray | None = field(default=None, repr=False)  # whitened b / (2 eps)


class _Geometry:
    """Whitened constraint data for one (basis, grid) pair."""

    def __init__(self, grid: ConstraintGrid):
        spec = grid.spec
        self.spec = spec
        self.free = np.flatnonzero(spec.free_mask)
        kd = np.diag(gram_operator(spec).matrix)[self.free]
        self.k_diag = kd
        self.k_isqrt = 1.0 / np.sqrt(kd)
        # A[j] is (dim, q)
        self.A = grid.jacobians[:, :, self.free] * self.k_isqrt
        self.q = self.free.size
        self.slabs = spec.dim == 1
        if self.slabs:
            a = self.A[:, 0, :]
            self.a = a
            # quadprog: C^T z >= b  with rows  a_j z >= -1  and  -a_j z >= -1
            self.qp_C = np.ascontiguousarray(np.hstack([a.T, -a.T]))
            self.qp_b = -np.ones(2 * a.shape[0])
            self.qp_G = np.eye(self.q)
        self.qp_eye = np.eye(self.q)
        # per-point SVD for the ellipsoidal projections
        u, s, vt = np.linalg.svd(self.A, full_matrices=False)
        self.sv = s
        self.V = np.transpose(vt, (0, 2, 1))  # (m, q, r)

    def lipschitz(self, z):
        g = self.A @ z  # (m, dim)
        return np.sum(g * g, axis=1)

    # -- projections ------------------------------------------------------

    def project_active_set(self, c):
        z, _, _, it, lagr, iact = quadprog.solve_qp(self.qp_G, c, self.qp_C, self.qp_b, 0)
        m = self.a.shape[0]
        act = sorted(int(i) - 1 for i in iact if i > 0 and lagr[int(i) - 1] > 0)
        if act:
            # polish on the identified face: z = c - N^T (N N^T)^+ (N c - s)
            rows = np.array([i % m for i in act])
            sign = np.where(np.array(act) < m, -1.0, 1.0)
            N = self.a[rows]
            corr = np.linalg.lstsq(N @ N.T, N @ c - sign, rcond=None)[0]
            zp = c - N.T @ corr
            if np.max(np.abs(self.a @ zp)) <= 1.0 + 1e-12 and np.all(corr * sign >= -1e-12):
                z = zp
        worst = np.max(np.abs(self.a @ z))
        if worst > 1.0:
            # rounding on far-away targets; pull back radially onto C'
            z = z / worst
        rows = tuple(sorted({i % m for i in act}))
        return z, int(it[0]), rows

    def _project_one(self, j, y):
        V, s = self.V[j], self.sv[j]
        zc = V.T @ y
        w = s * zc
        if w @ w <= 1.0:
            return y
        s2z2 = w * w
        s2 = s * s
        mu = 0.0
        for _ in range(100):
            den = 1.0 + mu * s2
            f = np.sum(s2z2 / den**2) - 1.0
            if f <= 1e-15:
                break
            fp = -2.0 * np.sum(s2z2 * s2 / den**3)
            mu -= f / fp
        return y + V @ (zc * (1.0 / (1.0 + mu * s2) - 1.0))

    def project_dykstra(self, c, tol, max_sweeps):
        m = self.A.shape[0]
        x = c.copy()
        incr = np.zeros((m, self.q))
        sweeps = 0
        for sweeps in range(1, max_sweeps + 1):
            x_prev = x.copy()
            for j in range(m):
                y = x + incr[j]
                x = self._project_one(j, y)
                incr[j] = y - x
            if np.max(np.abs(x - x_prev)) < tol and np.max(self.lipschitz(x)) <= 1.0 + tol:
                break
        lip = self.lipschitz(x)
        rows = tuple(int(j) for j in np.flatnonzero(lip > 1.0 - 1e-7))
        return x, sweeps, rows

    def project_cutting_plane(self, c, tol, max_rounds):
        lip = np.sqrt(self.lipschitz(c))
        rows, cuts = [], []
        z, rounds = c, 0
        for rounds in range(1, max_rounds + 1):
            bad = np.flatnonzero(lip > 1.0 + tol)
            if bad.size == 0:
                break
            # tangent cuts u^T A_j z <= 1 at the current point, worst first
            for j in bad[np.argsort(-lip[bad])][: 2 * self.q]:
                g = self.A[j] @ z
                cuts.append(self.A[j].T @ (g / np.linalg.norm(g)))
                rows.append(j)
            N = np.array(cuts)
            z = quadprog.solve_qp(self.qp_eye, c, np.ascontiguousarray(-N.T), -np.ones(len(cuts)), 0)[0]
            lip = np.sqrt(self.lipschitz(z))
        worst = lip.max()
        if worst > 1.0:
            z = z / worst
            lip = lip / worst
        active = tuple(int(j) for j in np.flatnonzero(lip > 1.0 - 1e-7))
        if active and not self.slabs:
            z, active = self._polish(c, z, active)
        return z, rounds, active

    def _polish(self, c, z, active, iters=20):
        """Newton on the KKT system of the binding constraints.

        The cut polytope only approximates the curved set, leaving the
        projection accurate to roughly the cut tolerance.  Solving
        z + sum_j mu_j A_j^T A_j z = c, |A_j z|^2 = 1 for the binding j
        recovers it to machine precision.  The polished point is kept only if
        it stays feasible with nonnegative multipliers.
        """
        Aa = self.A[list(active)]
        N = np.einsum("jdq,jd->jq", Aa, np.einsum("jdq,q->jd", Aa, z))
        mu = nnls(N.T, c - z)[0]
        keep = mu > 1e-9 * max(mu.max(), 1e-300)
        if not keep.any():
            return z, active
        idx = np.asarray(active)[keep]
        Aa, mu = Aa[keep], mu[keep]
        AtA = np.einsum("jdq,jdr->jqr", Aa, Aa)
        # independent normals only; duplicates (symmetric grid points) make the system singular
        zz, m = z.copy(), mu.copy()
        q, k = self.q, len(idx)
        for _ in range(iters):
            Nz = AtA @ zz
            r1 = zz + Nz.T @ m - c
            r2 = 0.5 * (np.einsum("q,jq->j", zz, Nz) - 1.0)
            if max(np.abs(r1).max(), np.abs(r2).max()) < 1e-14:
                break
            J = np.zeros((q + k, q + k))
            J[:q, :q] = np.eye(q) + np.einsum("j,jqr->qr", m, AtA)
            J[:q, q:] = Nz.T
            J[q:, :q] = Nz
            step = np.linalg.lstsq(J, -np.concatenate([r1, r2]), rcond=1e-12)[0]
            zz, m = zz + step[:q], m + step[q:]
        lip = np.sqrt(self.lipschitz(zz))
        if lip.max() > 1.0 + 1e-10 or m.min() < -1e-10 or np.linalg.norm(zz - z) > 1e-3 * (1 + np.linalg.norm(z)):
            return z, active
        return zz, tuple(int(j) for j in np.flatnonzero(lip > 1.0 - 1e-9))

    def hessian_factor(self, active, z=None, c=None):
        """Jacobian of the projection c -> z on the current active face.

        Slabs give the projector orthogonal to the active normals.  Curved
        constraints |A_j z| <= 1 add the multiplier curvature
        M = I + sum_j mu_j A_j^T A_j:  dz/dc = M^-1 - M^-1 N^T (N M^-1 N^T)^+ N M^-1.
        """
        if not active:
            return np.eye(self.q)
        if self.slabs or z is None:
            N = self.A[list(active)].reshape(-1, self.q)
            u, s, vt = np.linalg.svd(N, full_matrices=False)
            r = np.sum(s > 1e-10 * max(s[0], 1.0))
            Vr = vt[:r]
            return np.eye(self.q) - Vr.T @ Vr
        Aa = self.A[list(active)]
        N = np.einsum("jdq,jd->jq", Aa, np.einsum("jdq,q->jd", Aa, z))
        # KKT: c - z = sum_j mu_j N_j with mu >= 0; touching points with mu = 0 do not bind
        mu = nnls(N.T, c - z)[0]
        keep = mu > 1e-9 * max(mu.max(), 1e-300)
        if not keep.any():
            return np.eye(self.q)
        Aa, N, mu = Aa[keep], N[keep], mu[keep]
        M = np.eye(self.q) + np.einsum("j,jdq,jdr->qr", mu, Aa, Aa)
        Mi = np.linalg.inv(M)
        G = N @ Mi
        return Mi - G.T @ np.linalg.pinv(G @ N.T, rcond=1e-10) @ G

@lru_cache(maxsize=64)
def _geometry(grid: ConstraintGrid) -> _Geometry:
    return _Geometry(grid)


def _free_delta(delta, geo: _Geometry):
    d = np.asarray(delta.coeffs if isinstance(delta, FourierVec) else delta, dtype=float)
    if d.shape != (geo.spec.p,):
        raise ValueError(f"delta must have length {geo.spec.p}")
    if abs(d[0]) > 1e-8 * (1.0 + np.abs(d).max()):
        raise ValueError("delta has a nonzero constant mode: measures of unequal mass")
    return d[geo.free]


def solve_dual(delta, eps: float, grid: ConstraintGrid, opts: DualOptions = DualOptions()) -> DualSolution:
    """Maximiser eta*, value l(delta) and diagnostics.

    ``eps = 0`` is accepted only in ``relaxed`` mode (single ellipsoid), where
    the value is |(K∘G)^(-1/2) delta|.
    """
    geo = _geometry(grid)
    d = _free_delta(delta, geo)
    p = geo.spec.p
    if eps < 0 or (eps == 0 and opts.mode == "intersection"):
        raise ValueError("epsilon must be positive")
    b = geo.k_isqrt * d
    if not np.any(d):
        return DualSolution(np.zeros(p), 0.0, 0, 0.0, 0.0, True, eps)

    if opts.mode == "relaxed":
        if eps == 0:
            z = b / np.linalg.norm(b)
        else:
            c = b / (2.0 * eps)
            nc = np.linalg.norm(c)
            z = c if nc <= 1.0 else c / nc
        active = ("ball", float(nc)) if eps > 0 and nc > 1.0 else ()
        it, converged = 1, True
    else:
        c = b / (2.0 * eps)
        if np.max(geo.lipschitz(c)) <= 1.0:
            z, it, active = c, 0, ()
        else:
            proj = opts.projector
            if proj == "auto":
                proj = "active-set" if geo.slabs else "cutting-plane"
            if proj == "active-set" and not geo.slabs:
                raise ValueError("active-set projector needs a 1D grid")
            if proj == "active-set":
                z, it, active = geo.project_active_set(c)
            elif proj == "cutting-plane":
                z, it, active = geo.project_cutting_plane(c, min(opts.tol_feas, 1e-9), opts.max_iter)
            else:
                z, it, active = geo.project_dykstra(c, min(opts.tol_feas, 1e-9), opts.max_iter)
        converged = True

    feas = float(max(0.0, np.max(geo.lipschitz(z)) - 1.0)) if opts.mode == "intersection" else 0.0
    if opts.mode == "intersection" and feas > opts.tol_feas:
        converged = False
        log.warning("dual projection stopped with feasibility residual %.3g", feas)
    eta = np.zeros(p)
    eta[geo.free] = geo.k_isqrt * z
    value = float(z @ b - eps * (z @ z))
    target = b / (2.0 * eps) if eps > 0 else None
    return DualSolution(eta, value, it, feas, float(np.linalg.norm(z)), converged, eps, active, target)


def _require(sol: DualSolution, what: str) -> DualSolution:
    if not sol.converged:
        raise NonConverged(f"{what}: dual solver did not reach feasibility", sol)
    return sol


def distance(theta_a: FourierVec, theta_b: FourierVec, eps: float, grid: ConstraintGrid,
             opts: DualOptions = DualOptions()) -> float:
    """Regularised W1 between two measures given by their coefficients."""
    return _require(solve_dual(theta_a - theta_b, eps, grid, opts), "distance").value


def gradient(delta, eps: float, grid: ConstraintGrid, opts: DualOptions = DualOptions()) -> np.ndarray:
    """grad l(delta) = eta*(delta) (envelope theorem)."""
    return _require(solve_dual(delta, eps, grid, opts), "gradient").eta


def hessian_active(sol: DualSolution, grid: ConstraintGrid) -> np.ndarray:
    """Exact Hessian of l on the current active face (eps > 0).

    H = (K∘G)^(-1/2) P (K∘G)^(-1/2) / (2 eps) with P the Jacobian of the
    whitened projection on the active face (for slabs, the projector
    orthogonal to the active normals).  Valid away from face changes;
    elsewhere it is one element of the generalised Hessian.
    """
    if sol.epsilon <= 0:
        raise ValueError("the Hessian needs eps > 0")
    geo = _geometry(grid)
    p = geo.spec.p
    if sol.active and sol.active[0] == "ball":
        # z = c / |c| on the sphere: dz/dc = (I - z z^T) / |c|
        z = np.sqrt(geo.k_diag) * sol.eta[geo.free]
        P = (np.eye(geo.q) - np.outer(z, z)) / sol.active[1]
    else:
        z = np.sqrt(geo.k_diag) * sol.eta[geo.free]
        P = geo.hessian_factor(sol.active, z, sol.target)
    H = np.zeros((p, p))
    H[np.ix_(geo.free, geo.free)] = (geo.k_isqrt[:, None] * P * geo.k_isqrt[None, :]) / (2.0 * sol.epsilon)
    return H


def hessian_fd(delta, eps: float, grid: ConstraintGrid, opts: DualOptions = DualOptions(),
               h: float | None = None) -> np.ndarray:
    """Central finite differences of ``gradient``, symmetrised.

    Default step ``1e-4 * (1 + |delta|)``.  The constant row/column is zero.
    """
    geo = _geometry(grid)
    d = np.zeros(geo.spec.p)
    d[geo.free] = _free_delta(delta, geo)
    if h is None:
        h = 1e-4 * (1.0 + np.linalg.norm(d))
    p = geo.spec.p
    H = np.zeros((p, p))
    for k in geo.free:
        e = np.zeros(p)
        e[k] = h
        gp = gradient(d + e, eps, grid, opts)
        gm = gradient(d - e, eps, grid, opts)
        H[:, k] = (gp - gm) / (2.0 * h)
    return 0.5 * (H + H.T)
