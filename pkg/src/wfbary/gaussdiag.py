"""Empirical diagnostics of the Gaussian approximation of the barycenter.

Score vectors ``X_i = D̆^{-1} ∇̆ l(theta* - theta_i)`` are the summands of the
linearised statistic; their sum is compared with ``Z ~ N(0, Σ)`` through the
norm CDF (KS distance), random 1D projections (sliced W1) and the moment
functionals

    mu2 = sum_i E |Σ^{-1/2}(X_i - X_i')| |Σ^{-1/2} X_i|
    mu3 = sum_i E |Σ^{-1/2}(X_i - X_i')| |Σ^{-1/2} X_i| |X_i - X_i'|

with X_i' an independent copy, realised here by plug-in over the empirical
sample of score vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import wasserstein_distance

from .barycenter import BarycenterOptions, solve_barycenter
from .basis import ConstraintGrid, FourierVec
from .densities import stack
from .dual import DualOptions, NonConverged, solve_dual
from .fisher import FisherEstimate, breve_grad, schur_breve, sym_sqrt

log = logging.getLogger(__name__)

LEVELS = (0.5, 0.9, 0.95, 0.99)


@dataclass(frozen=True)
class ScoreSet:
    """Score vectors of one sample.

    ``n_sum`` is the number of i.i.d. summands the moment sums refer to; it
    defaults to the number of vectors, in which case ``sigma = sum_i X_i X_i^T``.
    """

    xs: np.ndarray
    n_sum: int
    sigma: np.ndarray
    whitened: np.ndarray = field(repr=False)
    rank: int = 0

    @classmethod
    def from_samples(cls, xs, n_sum: int | None = None) -> "ScoreSet":
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        N = xs.shape[0]
        n_sum = N if n_sum is None else int(n_sum)
        sigma = n_sum * (xs.T @ xs) / N
        W, rank = _inv_sqrt(sigma)
        return cls(xs, n_sum, sigma, xs @ W, rank)


def _inv_sqrt(S):
    """Pseudo-inverse square root of a PSD matrix and its numerical rank."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    tol = 1e-12 * max(w.max(initial=0.0), 1e-300) * S.shape[0]
    keep = w > tol
    rank = int(keep.sum())
    if rank < S.shape[0]:
        log.info("covariance has rank %d of %d; using the pseudo-inverse", rank, S.shape[0])
    r = np.zeros_like(w)
    r[keep] = 1.0 / np.sqrt(w[keep])
    return (V * r) @ V.T, rank


def score_vectors(theta_star: FourierVec, thetas: Sequence[FourierVec], F: FisherEstimate,
                  p_split: int | None, eps: float, grid: ConstraintGrid,
                  opts: DualOptions = DualOptions(), n_sum: int | None = None) -> ScoreSet:
    """X_i for each input; ``p_split = None`` or ``q`` gives the full-D variant D^{-1} grad l."""
    X = stack(thetas)
    grads = np.empty((X.shape[0], F.q))
    for i, x in enumerate(X):
        d = theta_star.coeffs - x
        d[0] = 0.0
        s = solve_dual(d, eps, grid, opts)
        if not s.converged:
            raise NonConverged(f"dual solve failed at measure {i}", s)
        grads[i] = s.eta[1:]
    return ScoreSet.from_samples(transform_scores(grads, F, p_split), n_sum)


def transform_scores(grads: np.ndarray, F: FisherEstimate, p_split: int | None) -> np.ndarray:
    """Map free-coordinate gradients to D̆^{-1} ∇̆ (or D^{-1} ∇ when p_split is None or q)."""
    if p_split is None or p_split == F.q:
        return grads @ F.D_inv
    Dbi = sym_sqrt(schur_breve(F, p_split), inverse=True)
    return breve_grad(grads, F, p_split) @ Dbi


def mu_moments(scores: ScoreSet, resample_pairs: int | None = None, rng_seed: int = 0):
    """(mu2, mu3) by plug-in over the empirical score sample.

    With ``resample_pairs=None`` every ordered pair (X, X') of sample points is
    used (exact plug-in); otherwise that many pairs are drawn with replacement.
    """
    xs, ws = scores.xs, scores.whitened
    N = xs.shape[0]
    if N < 2:
        raise ValueError("need at least two score vectors")
    if resample_pairs is None:
        s2 = s3 = 0.0
        wn = np.linalg.norm(ws, axis=1)
        for i in range(N):
            dw = np.linalg.norm(ws[i] - ws, axis=1)
            dx = np.linalg.norm(xs[i] - xs, axis=1)
            s2 += wn[i] * dw.sum()
            s3 += wn[i] * (dw * dx).sum()
        m2, m3 = s2 / N**2, s3 / N**2
    else:
        rng = np.random.default_rng(rng_seed)
        i = rng.integers(0, N, resample_pairs)
        j = rng.integers(0, N, resample_pairs)
        wn = np.linalg.norm(ws[i], axis=1)
        dw = np.linalg.norm(ws[i] - ws[j], axis=1)
        dx = np.linalg.norm(xs[i] - xs[j], axis=1)
        m2, m3 = np.mean(dw * wn), np.mean(dw * wn * dx)
    return float(scores.n_sum * m2), float(scores.n_sum * m3)


def gaussian_draws(sigma, n_draws: int, rng_seed: int = 0) -> np.ndarray:
    """Draws of Z ~ N(0, sigma) via the symmetric square root, shape (n_draws, k)."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    w, V = np.linalg.eigh(0.5 * (sigma + sigma.T))
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise ValueError("sigma is not positive semidefinite")
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    xi = np.random.default_rng(rng_seed).standard_normal((n_draws, sigma.shape[0]))
    return xi @ root


def gaussian_reference(sigma, n_draws: int, rng_seed: int = 0) -> np.ndarray:
    """Norms |Z| for Z ~ N(0, sigma)."""
    return np.linalg.norm(gaussian_draws(sigma, n_draws, rng_seed), axis=1)


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be nonempty")
    x = np.concatenate([a, b])
    fa = np.searchsorted(a, x, side="right") / a.size
    fb = np.searchsorted(b, x, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def anticoncentration(sigma, z: float, delta: float, n_draws: int = 100_000, rng_seed: int = 0) -> float:
    """Monte-Carlo estimate of P(|Z| in [z, z + delta]) / delta."""
    if not (z > 0 and delta > 0):
        raise ValueError("z and delta must be positive")
    r = gaussian_reference(sigma, n_draws, rng_seed)
    return float(np.mean((r >= z) & (r <= z + delta)) / delta)


def sliced_w1(stats: np.ndarray, ref: np.ndarray, n_proj: int = 16, rng_seed: int = 0) -> float:
    """Mean over random unit directions u of W1(u.stats, u.ref)."""
    stats = np.atleast_2d(stats)
    ref = np.atleast_2d(ref)
    u = np.random.default_rng(rng_seed).standard_normal((n_proj, stats.shape[1]))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return float(np.mean([wasserstein_distance(stats @ d, ref @ d) for d in u]))


@dataclass(frozen=True)
class BootstrapResult:
    stats: np.ndarray
    quantiles: dict
    failures: int
    seed: int


def bootstrap_region(thetas: Sequence[FourierVec], theta_hat: FourierVec, F: FisherEstimate,
                     B: int, eps: float, grid: ConstraintGrid, rng_seed: int = 0, *,
                     p_split: int | None = None, levels=LEVELS,
                     opts: BarycenterOptions = BarycenterOptions()) -> BootstrapResult:
    """Quantiles of |D̆ (theta_boot,u - theta_hat,u)| over B resamples with replacement."""
    if B < 100:
        raise ValueError("B must be at least 100")
    p_split = F.p_split if p_split is None else p_split
    Db = sym_sqrt(schur_breve(F, p_split)) if p_split < F.q else F.D
    n = len(thetas)
    rng = np.random.default_rng(rng_seed)
    u_hat = theta_hat.coeffs[1 : p_split + 1]
    stats, failures = [], 0
    for _ in range(B):
        idx = rng.integers(0, n, n)
        try:
            res = solve_barycenter([thetas[i] for i in idx], eps, grid, opts)
        except NonConverged:
            failures += 1
            continue
        if not res.converged:
            failures += 1
            continue
        stats.append(np.linalg.norm(Db @ (res.theta_hat.coeffs[1 : p_split + 1] - u_hat)))
    if failures:
        log.warning("%d of %d bootstrap replications failed", failures, B)
    stats = np.asarray(stats)
    qs = {float(a): float(np.quantile(stats, a)) if stats.size else float("nan") for a in levels}
    return BootstrapResult(stats, qs, failures, int(rng_seed))


@dataclass(frozen=True)
class DiagnosticsReport:
    ks_norm: float
    w1_proj: float
    mu2: float
    mu3: float
    c_a: float
    bootstrap_quantiles: tuple
    replications: int
    failures: int
    seeds: tuple

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def diagnose(stat_vectors: np.ndarray, sigma: np.ndarray, scores: ScoreSet, *, n_draws: int = 20000,
             n_proj: int = 16, rng_seed: int = 0, bootstrap: BootstrapResult | None = None,
             failures: int = 0, seeds: Sequence[int] = ()) -> DiagnosticsReport:
    """Compare replicated statistics D̆(theta_hat - theta*) with Z ~ N(0, sigma)."""
    stat_vectors = np.atleast_2d(stat_vectors)
    Z = gaussian_draws(sigma, n_draws, rng_seed)
    znorm = np.linalg.norm(Z, axis=1)
    ks = ks_distance(np.linalg.norm(stat_vectors, axis=1), znorm)
    w1 = sliced_w1(stat_vectors, Z, n_proj, rng_seed + 1)
    mu2, mu3 = mu_moments(scores)
    z0 = float(np.median(znorm))
    ca = anticoncentration(sigma, z0, 0.1 * max(float(np.std(znorm)), 1e-12), n_draws, rng_seed + 2) if z0 > 0 else 0.0
    bq = tuple(bootstrap.quantiles.values()) if bootstrap is not None else ()
    return DiagnosticsReport(ks, w1, mu2, mu3, ca, bq, stat_vectors.shape[0], failures, tuple(int(s) for s in seeds))
