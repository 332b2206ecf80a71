"""Real trigonometric basis on the periodic box [0, T]^d.

Conventions
-----------
The Gram weight is uniform, ``G(x) = 1 / T**d``, and the basis is orthonormal
under it: per axis the 1D functions are ``1``, ``sqrt(2) cos(2 pi k x / T)``
and ``sqrt(2) sin(2 pi k x / T)`` for ``k = 1..max_freq``; the d-dimensional
basis is their tensor product in C order.  The 1D ordering is

    [const, cos 1, sin 1, cos 2, sin 2, ..., cos M, sin M]

so coefficient 0 is always the constant (mass) mode.

Coefficients of a density ``phi`` are ``theta_k = int phi psi_k dx`` (no weight),
so ``theta_0`` is the total mass.  Since ``<phi / G, psi_k>_G = theta_k`` the
density is recovered as ``phi = G * sum_k theta_k psi_k``.

With this normalisation ``int grad psi_k . grad psi_j G dx`` is diagonal with
entry ``(2 pi / T)**2 * |k|**2`` where ``|k|`` is the integer frequency vector of
mode k, i.e. the constant ``c`` multiplying ``(2 pi k / T)**2`` is 1.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Union

import numpy as np


class AliasingError(ValueError):
    """Quadrature grid too coarse to resolve the requested frequencies."""


@dataclass(frozen=True)
class BasisSpec:
    dim: int = 1
    period: float = 1.0
    max_freq: int = 4

    def __post_init__(self):
        if self.dim < 1 or self.max_freq < 1:
            raise ValueError("dim and max_freq must be positive integers")
        if not self.period > 0:
            raise ValueError("period must be positive")

    @property
    def kind(self) -> str:
        return "real-trig"

    @property
    def n_axis(self) -> int:
        return 2 * self.max_freq + 1

    @property
    def p(self) -> int:
        return self.n_axis**self.dim

    @property
    def omega(self) -> float:
        return 2.0 * np.pi / self.period

    @cached_property
    def axis_freq(self) -> np.ndarray:
        """Integer frequency of each 1D basis function."""
        f = np.zeros(self.n_axis, dtype=int)
        f[1::2] = np.arange(1, self.max_freq + 1)
        f[2::2] = np.arange(1, self.max_freq + 1)
        return f

    @cached_property
    def axis_kind(self) -> np.ndarray:
        """0 = constant, 1 = cos, 2 = sin."""
        k = np.zeros(self.n_axis, dtype=int)
        k[1::2] = 1
        k[2::2] = 2
        return k

    @cached_property
    def multi_index(self) -> np.ndarray:
        """(p, dim) array of per-axis 1D basis indices."""
        idx = itertools.product(range(self.n_axis), repeat=self.dim)
        return np.array(list(idx), dtype=int).reshape(self.p, self.dim)

    @cached_property
    def frequencies(self) -> np.ndarray:
        """(p, dim) integer frequency vectors."""
        return self.axis_freq[self.multi_index]

    @cached_property
    def free_mask(self) -> np.ndarray:
        """True for every mode except the constant one."""
        m = np.ones(self.p, dtype=bool)
        m[0] = False
        return m

    @property
    def gram_weight(self) -> float:
        return self.period ** (-self.dim)

    # -- evaluation -------------------------------------------------------

    def _axis_values(self, t: np.ndarray):
        """1D basis values and derivatives at coordinates ``t`` (shape (N,))."""
        ang = self.omega * np.outer(t, np.arange(1, self.max_freq + 1))
        c, s = np.cos(ang), np.sin(ang)
        r2 = np.sqrt(2.0)
        w = self.omega * np.arange(1, self.max_freq + 1)
        val = np.empty((t.size, self.n_axis))
        der = np.empty((t.size, self.n_axis))
        val[:, 0] = 1.0
        der[:, 0] = 0.0
        val[:, 1::2] = r2 * c
        val[:, 2::2] = r2 * s
        der[:, 1::2] = -r2 * w * s
        der[:, 2::2] = r2 * w * c
        return val, der

    def _as_points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and x.ndim <= 1:
            x = x.reshape(-1, 1)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[-1] != self.dim:
            raise ValueError(f"points must have {self.dim} coordinates")
        return x

    def evaluate(self, x) -> np.ndarray:
        """Basis values, shape (N, p)."""
        x = self._as_points(x)
        out = np.ones((x.shape[0], self.p))
        for a in range(self.dim):
            val, _ = self._axis_values(x[:, a])
            out *= val[:, self.multi_index[:, a]]
        return out

    def gradient(self, x) -> np.ndarray:
        """Basis gradients, shape (N, dim, p)."""
        x = self._as_points(x)
        vals, ders = [], []
        for a in range(self.dim):
            v, d = self._axis_values(x[:, a])
            vals.append(v[:, self.multi_index[:, a]])
            ders.append(d[:, self.multi_index[:, a]])
        out = np.empty((x.shape[0], self.dim, self.p))
        for a in range(self.dim):
            g = ders[a].copy()
            for b in range(self.dim):
                if b != a:
                    g *= vals[b]
            out[:, a, :] = g
        return out

    def grid(self, m_per_axis: int) -> np.ndarray:
        """Uniform periodic tensor grid, shape (m**dim, dim)."""
        t = np.arange(m_per_axis) * (self.period / m_per_axis)
        mesh = np.meshgrid(*([t] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)


@dataclass(frozen=True)
class FourierVec:
    coeffs: np.ndarray
    spec: BasisSpec

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).reshape(-1)
        if c.size != self.spec.p:
            raise ValueError(f"expected {self.spec.p} coefficients, got {c.size}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def mass(self) -> float:
        return float(self.coeffs[0])

    def __sub__(self, other: "FourierVec") -> "FourierVec":
        _check_same_spec(self, other)
        return FourierVec(self.coeffs - other.coeffs, self.spec)

    def __add__(self, other: "FourierVec") -> "FourierVec":
        _check_same_spec(self, other)
        return FourierVec(self.coeffs + other.coeffs, self.spec)


def _check_same_spec(a: FourierVec, b: FourierVec):
    if a.spec != b.spec:
        raise ValueError("Fourier vectors use different bases")


@dataclass(frozen=True)
class GramOperator:
    """The matrix K∘G = int K_x G(x) dx restricted to nothing; null modes flagged."""

    matrix: np.ndarray
    null_mask: np.ndarray = field(repr=False)

    @property
    def diag(self) -> np.ndarray:
        return np.diag(self.matrix)

    def inverse_sqrt(self) -> np.ndarray:
        """(K∘G)^(-1/2) on the positive-definite block (zero on null modes)."""
        d = self.diag
        out = np.zeros_like(d)
        out[~self.null_mask] = 1.0 / np.sqrt(d[~self.null_mask])
        return np.diag(out)

    def sqrt(self) -> np.ndarray:
        return np.diag(np.sqrt(np.clip(self.diag, 0.0, None)))


@dataclass(frozen=True, eq=False)
class ConstraintGrid:
    """Grid points x_j with Jacobians J_j (dim x p) so that eta^T K_xj eta = |J_j eta|^2."""

    spec: BasisSpec
    points: np.ndarray
    jacobians: np.ndarray
    under_resolved: bool = False

    @property
    def m(self) -> int:
        return self.points.shape[0]

    def lipschitz_values(self, eta: np.ndarray) -> np.ndarray:
        """|J_j eta|^2 for every grid point."""
        g = np.einsum("jap,p->ja", self.jacobians, np.asarray(eta, dtype=float))
        return np.sum(g * g, axis=1)

    def feasibility_residual(self, eta: np.ndarray) -> float:
        return float(max(0.0, np.max(self.lipschitz_values(eta)) - 1.0))


def gram_operator(spec: BasisSpec) -> GramOperator:
    freq = spec.frequencies.astype(float)
    d = spec.omega**2 * np.sum(freq * freq, axis=1)
    return GramOperator(np.diag(d), null_mask=d == 0.0)


def constraint_grid(spec: BasisSpec, m_per_axis: int = 128) -> ConstraintGrid:
    """Pointwise Lipschitz constraints on a uniform grid.

    With ``m_per_axis >= 2 * max_freq + 1`` the trapezoid rule integrates
    |grad f|^2 exactly, so grid feasibility implies eta^T (K∘G) eta <= 1.
    Coarser grids are allowed but flagged ``under_resolved``.
    """
    if m_per_axis < 1:
        raise ValueError("m_per_axis must be positive")
    coarse = m_per_axis < spec.n_axis
    if coarse:
        warnings.warn(
            f"constraint grid m={m_per_axis} < 2*max_freq+1={spec.n_axis}: "
            "feasible set is under-constrained",
            stacklevel=2,
        )
    pts = spec.grid(m_per_axis)
    return ConstraintGrid(spec, pts, spec.gradient(pts), under_resolved=coarse)


Density = Union[Callable[[np.ndarray], np.ndarray], np.ndarray]


def project_density(density: Density, spec: BasisSpec, quadrature: int = 256) -> FourierVec:
    """Coefficients ``theta_k = int phi psi_k dx`` by periodic trapezoid quadrature.

    ``density`` is either a callable on (N, dim) points or an array of samples on
    the ``spec.grid(quadrature)`` grid (flat or shaped (m,)*dim).
    """
    if quadrature < spec.n_axis:
        raise AliasingError(
            f"quadrature grid {quadrature} < 2*max_freq+1 = {spec.n_axis} per axis"
        )
    pts = spec.grid(quadrature)
    if callable(density):
        vals = np.asarray(density(pts if spec.dim > 1 else pts[:, 0]), dtype=float)
    else:
        vals = np.asarray(density, dtype=float)
    vals = vals.reshape(-1)
    if vals.size != pts.shape[0]:
        raise ValueError(f"expected {pts.shape[0]} density samples, got {vals.size}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("density values must be finite")
    cell = (spec.period / quadrature) ** spec.dim
    return FourierVec(cell * (spec.evaluate(pts).T @ vals), spec)


def reconstruct_density(theta: FourierVec, x) -> np.ndarray:
    """Density ``G(x) * sum_k theta_k psi_k(x)``; may dip below zero (not clipped)."""
    out = theta.spec.gram_weight * (theta.spec.evaluate(x) @ theta.coeffs)
    return out
