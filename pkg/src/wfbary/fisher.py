"""Fisher matrix D^2 = sum_i H_i at a reference point, its Schur complement
on the leading ``p_split`` free coordinates, and spectral summaries.

All matrices here live on the free (nonconstant) coordinates, ``q = p - 1``.
The objective is minimised, so D^2 is the (PSD) Hessian of the summed loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .basis import BasisSpec, ConstraintGrid, FourierVec, gram_operator
from .densities import stack
from .dual import DualOptions, hessian_active, hessian_fd, solve_dual, NonConverged

log = logging.getLogger(__name__)

CLIP = 1e-8
MAX_COND = 1e10


@dataclass(frozen=True)
class FisherEstimate:
    D2: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    lambda_min_DKGD: float
    p_split: int
    condition: float
    spec: BasisSpec

    @property
    def q(self) -> int:
        return self.D2.shape[0]

    @property
    def D(self) -> np.ndarray:
        """Symmetric square root of D^2."""
        return (self.eigvecs * np.sqrt(self.eigvals)) @ self.eigvecs.T

    @property
    def D_inv(self) -> np.ndarray:
        return (self.eigvecs / np.sqrt(self.eigvals)) @ self.eigvecs.T

    @property
    def eig_D(self) -> np.ndarray:
        return np.sqrt(self.eigvals)

    def free(self, v) -> np.ndarray:
        """Drop the constant coordinate of a length-p vector (length-q passes through)."""
        v = np.asarray(v.coeffs if isinstance(v, FourierVec) else v, dtype=float)
        if v.shape[-1] == self.spec.p:
            return v[..., 1:]
        if v.shape[-1] != self.q:
            raise ValueError(f"expected length {self.spec.p} or {self.q}, got {v.shape[-1]}")
        return v


def from_matrix(D2: np.ndarray, spec: BasisSpec, p_split: int | None = None) -> FisherEstimate:
    """Wrap a free-coordinate matrix: symmetrise, clip tiny eigenvalues, summarise."""
    D2 = np.asarray(D2, dtype=float)
    q = spec.p - 1
    if D2.shape != (q, q):
        raise ValueError(f"D2 must be {q}x{q} (free coordinates)")
    D2 = 0.5 * (D2 + D2.T)
    w, V = np.linalg.eigh(D2)
    floor = CLIP * max(1.0, abs(w).max())
    if w.min() < floor:
        if w.min() < -floor:
            log.warning("D2 has negative eigenvalue %.3g; clipped to %.1g", w.min(), floor)
        else:
            log.info("clipping %d small D2 eigenvalues to %.1g", int(np.sum(w < floor)), floor)
        w = np.maximum(w, floor)
    cond = float(w.max() / w.min())
    D = (V * np.sqrt(w)) @ V.T
    kd = np.diag(gram_operator(spec).matrix)[1:]
    lam = float(np.linalg.eigvalsh(D @ (kd[:, None] * D)).min())
    if p_split is None:
        p_split = q // 2
    if not 1 <= p_split <= q:
        raise ValueError(f"p_split must lie in [1, {q}]")
    return FisherEstimate(V @ np.diag(w) @ V.T, w, V, lam, int(p_split), cond, spec)


def per_measure_hessians(theta_ref: FourierVec, thetas: Sequence[FourierVec], eps: float,
                         grid: ConstraintGrid, opts: DualOptions = DualOptions(),
                         method: str = "fd") -> np.ndarray:
    """Stack of free-coordinate Hessians H_i of l at theta_ref - theta_i."""
    X = stack(thetas)
    out = np.empty((X.shape[0], grid.spec.p - 1, grid.spec.p - 1))
    for i, x in enumerate(X):
        d = theta_ref.coeffs - x
        d[0] = 0.0
        if method == "fd":
            H = hessian_fd(d, eps, grid, opts)
        elif method == "analytic":
            s = solve_dual(d, eps, grid, opts)
            if not s.converged:
                raise NonConverged(f"dual solve failed at measure {i}", s)
            H = hessian_active(s, grid)
        else:
            raise ValueError(f"unknown Hessian method {method!r}")
        out[i] = H[1:, 1:]
    return out


def estimate_fisher(theta_ref: FourierVec, thetas: Sequence[FourierVec], eps: float,
                    grid: ConstraintGrid, opts: DualOptions = DualOptions(), *,
                    p_split: int | None = None, method: str = "fd",
                    scale: float = 1.0) -> FisherEstimate:
    """D^2 = scale * sum_i H_i with H_i the Hessian of l(theta_ref - theta_i).

    ``scale`` lets a large calibration sample stand in for a sample of another
    size: pass ``n / n_cal`` to estimate the Fisher matrix of an n-sample.
    """
    if theta_ref.spec != grid.spec:
        raise ValueError("reference point and grid use different bases")
    H = per_measure_hessians(theta_ref, thetas, eps, grid, opts, method)
    return from_matrix(scale * H.sum(axis=0), grid.spec, p_split)


def _blocks(F: FisherEstimate, p_split: int):
    if not 1 <= p_split < F.q:
        raise ValueError(f"p_split must lie in [1, {F.q - 1}]")
    A = F.D2
    u, v = slice(0, p_split), slice(p_split, None)
    Dv = A[v, v]
    wv = np.linalg.eigvalsh(Dv)
    cond = np.inf if wv.min() <= 0 else wv.max() / wv.min()
    if cond >= MAX_COND:
        raise np.linalg.LinAlgError(f"D2_v block is singular (condition number {cond:.3g})")
    return A[u, u], A[u, v], Dv


def schur_breve(F: FisherEstimate, p_split: int | None = None) -> np.ndarray:
    """D2_u - D2_uv D2_v^{-1} D2_vu."""
    p_split = F.p_split if p_split is None else p_split
    if p_split == F.q:
        return F.D2.copy()
    Du, Duv, Dv = _blocks(F, p_split)
    S = Du - Duv @ np.linalg.solve(Dv, Duv.T)
    return 0.5 * (S + S.T)


def breve_grad(g, F: FisherEstimate, p_split: int | None = None) -> np.ndarray:
    """g_u - D2_uv D2_v^{-1} g_v; ``g`` may be length p or q (or a stack of them)."""
    p_split = F.p_split if p_split is None else p_split
    g = F.free(g)
    if p_split == F.q:
        return g.copy()
    _, Duv, Dv = _blocks(F, p_split)
    gu, gv = g[..., :p_split], g[..., p_split:]
    return gu - np.linalg.solve(Dv, gv.T).T @ Duv.T


def sym_sqrt(S: np.ndarray, inverse: bool = False) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if w.min() <= 0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    r = 1.0 / np.sqrt(w) if inverse else np.sqrt(w)
    return (V * r) @ V.T
