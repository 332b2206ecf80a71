"""Named analytic density families on the periodic box and CSV grid input.

Every family knows its exact Fourier coefficients in the real trig basis, its
pdf, and (in 1D) its CDF on [0, T) so that oracle discretisations carry exact
cell masses.  Multi-dimensional families are products of 1D factors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .basis import BasisSpec, FourierVec, project_density


class Density1D:
    """A probability density on the circle [0, T)."""

    period: float

    def pdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """Mass of [0, x] for x in [0, T]."""
        raise NotImplementedError

    def axis_coeffs(self, spec: BasisSpec) -> np.ndarray:
        """Coefficients against the 1D basis [1, cos 1, sin 1, ...]."""
        raise NotImplementedError

    def cell_masses(self, n_cells: int) -> np.ndarray:
        edges = np.linspace(0.0, self.period, n_cells + 1)
        return np.diff(self.cdf(edges))


def _check_period(spec: BasisSpec, period: float):
    if not np.isclose(spec.period, period):
        raise ValueError(f"density period {period} does not match basis period {spec.period}")


@dataclass(frozen=True)
class Uniform1D(Density1D):
    """Uniform on the arc [start, start + width) (wraps around T)."""

    start: float
    width: float
    period: float = 1.0

    def __post_init__(self):
        if not 0 < self.width <= self.period:
            raise ValueError("width must lie in (0, period]")

    def pdf(self, x):
        r = np.mod(np.asarray(x, dtype=float) - self.start, self.period)
        return np.where(r < self.width, 1.0 / self.width, 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        T, w = self.period, self.width
        s = np.mod(self.start, T)
        head = np.clip(x - s, 0.0, min(w, T - s))
        tail = np.clip(x, 0.0, max(0.0, s + w - T))
        return (head + tail) / w

    def axis_coeffs(self, spec):
        _check_period(spec, self.period)
        k = np.arange(1, spec.max_freq + 1)
        wk = spec.omega * k
        a, b = self.start, self.start + self.width
        out = np.empty(spec.n_axis)
        out[0] = 1.0
        if self.width == self.period:
            out[1:] = 0.0
            return out
        r2 = np.sqrt(2.0)
        out[1::2] = r2 * (np.sin(wk * b) - np.sin(wk * a)) / (self.width * wk)
        out[2::2] = r2 * (np.cos(wk * a) - np.cos(wk * b)) / (self.width * wk)
        return out

    def quantile(self, s):
        """Quantile on the unwrapped line (start + s * width)."""
        return self.start + np.asarray(s, dtype=float) * self.width


@dataclass(frozen=True)
class WrappedGaussian1D(Density1D):
    mu: float
    sigma: float
    period: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def _wraps(self):
        n = int(np.ceil(8 * self.sigma / self.period)) + 1
        return np.arange(-n, n + 1) * self.period

    def pdf(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        z = (x - self.mu - self._wraps()) / self.sigma
        return np.sum(np.exp(-0.5 * z * z), axis=-1) / (self.sigma * np.sqrt(2 * np.pi))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        sh = self.mu + self._wraps()
        return np.sum(ndtr((x - sh) / self.sigma) - ndtr(-sh / self.sigma), axis=-1)

    def axis_coeffs(self, spec):
        _check_period(spec, self.period)
        wk = spec.omega * np.arange(1, spec.max_freq + 1)
        damp = np.sqrt(2.0) * np.exp(-0.5 * (wk * self.sigma) ** 2)
        out = np.empty(spec.n_axis)
        out[0] = 1.0
        out[1::2] = damp * np.cos(wk * self.mu)
        out[2::2] = damp * np.sin(wk * self.mu)
        return out


@dataclass(frozen=True)
class TrigPerturbed1D(Density1D):
    """(1/T) (1 + sum_k a_k psi_k(x)) with ``amps`` = [a_cos1, a_sin1, a_cos2, ...]."""

    amps: tuple
    period: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.amps, dtype=float)
        if a.size % 2:
            raise ValueError("amps must hold cos/sin pairs")
        if np.sqrt(2.0) * np.sum(np.abs(a)) >= 1.0:
            raise ValueError("perturbation too large: density would not stay positive")

    @property
    def _a(self):
        return np.asarray(self.amps, dtype=float)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        a = self._a
        k = np.arange(1, a.size // 2 + 1)
        ang = 2 * np.pi / self.period * np.multiply.outer(x, k)
        val = 1 + np.sqrt(2.0) * (np.cos(ang) @ a[0::2] + np.sin(ang) @ a[1::2])
        return val / self.period

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        a = self._a
        k = np.arange(1, a.size // 2 + 1)
        w = 2 * np.pi / self.period * k
        ang = np.multiply.outer(x, w)
        integ = np.sqrt(2.0) * (np.sin(ang) @ (a[0::2] / w) + (1 - np.cos(ang)) @ (a[1::2] / w))
        return (x + integ) / self.period

    def axis_coeffs(self, spec):
        _check_period(spec, self.period)
        out = np.zeros(spec.n_axis)
        out[0] = 1.0
        n = min(self._a.size, spec.n_axis - 1)
        out[1 : n + 1] = self._a[:n]
        return out


@dataclass(frozen=True)
class Mixture1D(Density1D):
    components: tuple
    weights: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.components) != w.size or w.size == 0:
            raise ValueError("need one weight per component")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be nonnegative and sum to 1")
        periods = {c.period for c in self.components}
        if len(periods) != 1:
            raise ValueError("mixture components must share one period")

    @property
    def period(self):
        return self.components[0].period

    def pdf(self, x):
        return sum(w * c.pdf(x) for c, w in zip(self.components, self.weights))

    def cdf(self, x):
        return sum(w * c.cdf(x) for c, w in zip(self.components, self.weights))

    def axis_coeffs(self, spec):
        return sum(w * c.axis_coeffs(spec) for c, w in zip(self.components, self.weights))


@dataclass(frozen=True)
class ProductDensity:
    """Product of 1D densities, one per axis (the d-dimensional families)."""

    factors: tuple

    @property
    def dim(self):
        return len(self.factors)

    @property
    def period(self):
        return self.factors[0].period

    def pdf(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        out = np.ones(x.shape[0])
        for a, f in enumerate(self.factors):
            out *= f.pdf(x[:, a])
        return out


def coefficients(density, spec: BasisSpec) -> FourierVec:
    """Exact Fourier coefficients of an analytic family."""
    if isinstance(density, Density1D):
        if spec.dim != 1:
            raise ValueError("1D density used with a multi-dimensional basis")
        return FourierVec(density.axis_coeffs(spec), spec)
    if isinstance(density, ProductDensity):
        if density.dim != spec.dim:
            raise ValueError("density dimension does not match basis")
        per_axis = [f.axis_coeffs(BasisSpec(1, spec.period, spec.max_freq)) for f in density.factors]
        c = np.ones(spec.p)
        for a, ax in enumerate(per_axis):
            c *= ax[spec.multi_index[:, a]]
        return FourierVec(c, spec)
    raise TypeError(f"no exact coefficients for {type(density).__name__}")


def from_config(cfg: dict, period: float = 1.0, dim: int = 1):
    """Build a density from a config mapping such as
    ``{"family": "wrapped_gaussian", "mu": 0.3, "sigma": 0.05}``.

    Families: ``uniform`` (start, width), ``wrapped_gaussian`` (mu, sigma),
    ``trig_perturbed`` (amps), ``mixture`` (components, weights).  For
    ``dim > 1`` scalar parameters may be per-axis lists; the result is a product.
    """
    fam = cfg.get("family")
    if dim > 1:
        factors = []
        for a in range(dim):
            sub = {k: (v[a] if isinstance(v, (list, tuple)) and k not in ("amps", "components", "weights") else v)
                   for k, v in cfg.items()}
            factors.append(from_config(sub, period, 1))
        return ProductDensity(tuple(factors))
    if fam == "uniform":
        return Uniform1D(float(cfg.get("start", 0.0)), float(cfg.get("width", period)), period)
    if fam == "wrapped_gaussian":
        return WrappedGaussian1D(float(cfg["mu"]), float(cfg["sigma"]), period)
    if fam == "trig_perturbed":
        return TrigPerturbed1D(tuple(float(a) for a in cfg["amps"]), period)
    if fam == "mixture":
        comps = tuple(from_config(c, period, 1) for c in cfg["components"])
        return Mixture1D(comps, tuple(float(w) for w in cfg["weights"]))
    raise ValueError(f"unknown density family {fam!r}")


def read_grid_csv(path, spec: BasisSpec) -> FourierVec:
    """Project a density sampled on the uniform grid ``spec.grid(m)``.

    CSV columns: coordinates..., value (header optional).  Rows may come in any
    order; they are matched to grid cells by rounding coordinates.
    """
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                continue  # header
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != spec.dim + 1:
        raise ValueError(f"{path}: expected {spec.dim} coordinate columns plus a value column")
    m = round(arr.shape[0] ** (1.0 / spec.dim))
    if m**spec.dim != arr.shape[0]:
        raise ValueError(f"{path}: {arr.shape[0]} rows do not form a full tensor grid")
    h = spec.period / m
    idx = np.mod(np.rint(arr[:, :-1] / h).astype(int), m)
    flat = np.ravel_multi_index(tuple(idx.T), (m,) * spec.dim)
    vals = np.full(m**spec.dim, np.nan)
    vals[flat] = arr[:, -1]
    if np.isnan(vals).any():
        raise ValueError(f"{path}: grid has missing or duplicated cells")
    return project_density(vals, spec, quadrature=m)


def write_grid_csv(path, density, spec: BasisSpec, m: int):
    pts = spec.grid(m)
    vals = density.pdf(pts[:, 0] if spec.dim == 1 else pts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{a}" for a in range(spec.dim)] + ["value"])
        for p, v in zip(pts, vals):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])


def load_density(entry, spec: BasisSpec) -> FourierVec:
    """Manifest entry: a CSV path string, ``{"csv": path}`` or a family config."""
    if isinstance(entry, str):
        return read_grid_csv(entry, spec)
    if "csv" in entry:
        return read_grid_csv(entry["csv"], spec)
    return coefficients(from_config(entry, spec.period, spec.dim), spec)


def stack(thetas: Sequence[FourierVec]) -> np.ndarray:
    if not thetas:
        raise ValueError("need at least one measure")
    spec = thetas[0].spec
    if any(t.spec != spec for t in thetas):
        raise ValueError("all measures must share one BasisSpec")
    return np.stack([t.coeffs for t in thetas])
