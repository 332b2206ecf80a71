"""Ground-truth transport computations used to check the Fourier solvers."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# POT probes every installed array backend on import; only numpy is needed.
for _b in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_b}", "1")
import ot  # noqa: E402

MAX_ATOMS = 2048


@dataclass(frozen=True)
class DiscreteMeasure:
    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if s.shape[0] != w.size:
            raise ValueError("support and weights differ in length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, support, weights) -> "DiscreteMeasure":
        w = np.clip(np.asarray(weights, dtype=float), 0.0, None)
        w = w / w.sum()
        # absorb the last bit of rounding so the sum check is exact enough
        w[np.argmax(w)] += 1.0 - w.sum()
        return cls(support, w)

    @property
    def dim(self):
        return self.support.shape[1]


def grid_measure(density, n_cells: int) -> DiscreteMeasure:
    """Cell masses of a 1D family on [0, T) placed at cell midpoints."""
    T = density.period
    mids = (np.arange(n_cells) + 0.5) * T / n_cells
    return DiscreteMeasure.normalized(mids, density.cell_masses(n_cells))


def sampled_measure(values: np.ndarray, points: np.ndarray) -> DiscreteMeasure:
    """Measure from (possibly slightly negative) density samples; negatives clipped."""
    return DiscreteMeasure.normalized(points, values)


def _cost(xa, xb, power, period):
    diff = np.abs(xa[:, None, :] - xb[None, :, :])
    if period is not None:
        diff = np.minimum(diff, period - diff)
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    return d**power


def network_simplex_cost(a: DiscreteMeasure, b: DiscreteMeasure, power: float = 1.0,
                         period: float | None = None) -> float:
    """min_pi sum pi_ij |x_i - y_j|^power by the network simplex (POT ``emd``)."""
    if a.dim != b.dim:
        raise ValueError("measures live in different dimensions")
    if max(a.weights.size, b.weights.size) > MAX_ATOMS:
        raise ValueError(f"oracle limited to {MAX_ATOMS} atoms per side")
    M = _cost(a.support, b.support, power, period)
    val, log = ot.emd2(a.weights, b.weights, M, numItermax=10_000_000, log=True)
    if log.get("warning"):
        raise ValueError(f"network simplex failed: {log['warning']}")
    return float(val)


def _cdf_w1_sorted(a: DiscreteMeasure, b: DiscreteMeasure) -> float:
    x = np.concatenate([a.support[:, 0], b.support[:, 0]])
    w = np.concatenate([a.weights, -b.weights])
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    diff = np.cumsum(w)[:-1]
    return float(np.sum(np.abs(diff) * np.diff(x)))


def circle_w1(a: DiscreteMeasure, b: DiscreteMeasure, period: float) -> float:
    """W1 on the circle: min_c int |F_a - F_b - c| (c a weighted median)."""
    x = np.mod(np.concatenate([a.support[:, 0], b.support[:, 0]]), period)
    w = np.concatenate([a.weights, -b.weights])
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    diff = np.cumsum(w)
    gaps = np.diff(np.append(x, x[0] + period))
    # weighted median of diff with weights gaps
    o = np.argsort(diff, kind="stable")
    cw = np.cumsum(gaps[o])
    c = diff[o][np.searchsorted(cw, 0.5 * cw[-1])]
    return float(np.sum(np.abs(diff - c) * gaps))


def discrete_ot_w1(a: DiscreteMeasure, b: DiscreteMeasure, period: float | None = None,
                   cross_check: bool = True) -> float:
    """Exact W1 between discrete measures (Euclidean or torus ground cost).

    In 1D the CDF formula (quantile coupling, or its circular version) gives
    the value and the network simplex confirms it when ``cross_check``.
    """
    if abs(a.weights.sum() - b.weights.sum()) > 1e-12:
        raise ValueError("measures have unequal mass")
    if a.dim != b.dim:
        raise ValueError("measures live in different dimensions")
    if a.dim == 1:
        val = _cdf_w1_sorted(a, b) if period is None else circle_w1(a, b, period)
        if cross_check and max(a.weights.size, b.weights.size) <= MAX_ATOMS:
            ns = network_simplex_cost(a, b, 1.0, period)
            if abs(ns - val) > 1e-9 * max(1.0, val):
                raise ArithmeticError(f"network simplex {ns!r} disagrees with CDF formula {val!r}")
        return val
    return network_simplex_cost(a, b, 1.0, period)


def quantile_w1_1d(qa: Callable, qb: Callable, quad_points: int = 4096) -> float:
    """int_0^1 |q_a(s) - q_b(s)| ds by the midpoint rule."""
    s = (np.arange(quad_points) + 0.5) / quad_points
    return float(np.mean(np.abs(np.asarray(qa(s)) - np.asarray(qb(s)))))


def quantile_barycenter_1d(quantiles: Sequence[Callable]) -> Callable:
    """Pointwise average of quantile functions (monotone by construction)."""
    qs = list(quantiles)
    if not qs:
        raise ValueError("need at least one quantile function")

    def q(s):
        return sum(np.asarray(f(s), dtype=float) for f in qs) / len(qs)

    return q


def circles_w2(m1, r1: float, m2, r2: float) -> float:
    """W2 between uniform measures on two circles (centre m, radius r)."""
    if r1 < 0 or r2 < 0:
        raise ValueError("radii must be nonnegative")
    dm = np.atleast_1d(np.asarray(m2, dtype=float) - np.asarray(m1, dtype=float))
    return float(np.sqrt(dm @ dm + (r2 - r1) ** 2))


def circle_points(m, r: float, n: int) -> DiscreteMeasure:
    m = np.asarray(m, dtype=float)
    if m.ndim == 0:
        m = np.array([m, 0.0])
    ang = 2 * np.pi * np.arange(n) / n
    pts = m + r * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return DiscreteMeasure(pts, np.full(n, 1.0 / n))


def _psd_sqrt(S):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ValueError("matrix must be square and symmetric")
    w, V = np.linalg.eigh(S)
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise ValueError("matrix is not positive semidefinite")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gaussian_w2(S1, S2) -> float:
    """W2 between centred Gaussians: tr S1 + tr S2 - 2 tr (S2^1/2 S1 S2^1/2)^1/2."""
    r1 = _psd_sqrt(S1)
    r2 = _psd_sqrt(S2)
    S1 = r1 @ r1
    S2 = r2 @ r2
    cross = _psd_sqrt(0.5 * (r2 @ S1 @ r2 + (r2 @ S1 @ r2).T))
    val = np.trace(S1) + np.trace(S2) - 2.0 * np.trace(cross)
    return float(np.sqrt(max(val, 0.0)))
