"""Closed-form bound quantities for the linearised barycenter statistic.

With ``lam = lambda_min(D K∘G D)``:

    v^2 = n / (eps lam)^2,   R = 1 / (eps lam),
    E = 12 v sqrt(2 p_D) + 24 R p_D,
    z(t) = E + sqrt(2 t (v^2 + 2 R E)) + t R / 3,
    delta(r) = r sqrt(n) C_Q / (eps lam),
    diamond(r, t) = (delta(r) + z(t)) r.

``C_Q`` is normalised so that int |D^{-1} grad q| = C_Q / sqrt(n).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate

BALL_SQRT_CONST = 1.42
BALL_LINEAR_CONST = 2.1


@dataclass(frozen=True)
class BoundInputs:
    n: int
    p: int
    eps: float
    t: float
    C_Q: float
    lambda_min_DKGD: float
    eigs_D: tuple
    r: float

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        if not (self.eps > 0 and self.lambda_min_DKGD > 0 and self.r > 0):
            raise ValueError("eps, lambda_min_DKGD and r must be positive")
        if self.t < 0 or self.C_Q < 0:
            raise ValueError("t and C_Q must be nonnegative")
        object.__setattr__(self, "eigs_D", tuple(float(e) for e in np.ravel(self.eigs_D)))
        if not self.eigs_D or min(self.eigs_D) <= 0:
            raise ValueError("eigenvalues of D must be positive")


@dataclass(frozen=True)
class BoundReport:
    inputs: BoundInputs
    p_D: float
    v: float
    R: float
    E: float
    z_t: float
    delta_r: float
    diamond: float
    z_t_asymptotic: float
    diamond_asymptotic: float
    r_bound: float
    mu3_bound: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"]["eigs_D"] = list(self.inputs.eigs_D)
        return d


def ellipsoid_entropy_pD(eigs_D) -> float:
    """sqrt(sum_i log^2(lam_i^2) / lam_i^2)."""
    lam = np.asarray(eigs_D, dtype=float).ravel()
    if lam.size == 0 or np.any(lam <= 0):
        raise ValueError("eigenvalues must be positive")
    return float(np.sqrt(np.sum(np.log(lam**2) ** 2 / lam**2)))


def ball_entropy_integrals(p: int, r: float, audit: bool = False):
    """Dudley-type integrals over a ball of radius r in R^p.

    Returns ``(1.42 r sqrt(p), 2.1 r p)``.  With ``audit`` also returns the
    numerically integrated ``int_0^1 sqrt(log(3/e)) de`` and ``int_0^1 log(3/e) de``
    that these constants dominate.
    """
    if p < 1 or not r > 0:
        raise ValueError("need p >= 1 and r > 0")
    out = (BALL_SQRT_CONST * r * math.sqrt(p), BALL_LINEAR_CONST * r * p)
    if not audit:
        return out
    a, _ = integrate.quad(lambda e: math.sqrt(math.log(3.0 / e)), 0.0, 1.0)
    b, _ = integrate.quad(lambda e: math.log(3.0 / e), 0.0, 1.0)
    return out, (a, b)


def compute_bounds(inp: BoundInputs) -> BoundReport:
    lam = inp.lambda_min_DKGD
    el = inp.eps * lam
    p_D = ellipsoid_entropy_pD(inp.eigs_D)
    v = math.sqrt(inp.n) / el
    R = 1.0 / el
    E = 12.0 * v * math.sqrt(2.0 * p_D) + 24.0 * R * p_D
    z = E + math.sqrt(2.0 * inp.t * (v * v + 2.0 * R * E)) + inp.t * R / 3.0
    delta = inp.r * math.sqrt(inp.n) * inp.C_Q / el
    z_asym = math.sqrt(inp.n) * (12.0 * math.sqrt(2.0 * p_D) + math.sqrt(2.0 * inp.t)) / el
    return BoundReport(
        inputs=inp,
        p_D=p_D,
        v=v,
        R=R,
        E=E,
        z_t=z,
        delta_r=delta,
        diamond=(delta + z) * inp.r,
        z_t_asymptotic=z_asym,
        diamond_asymptotic=(delta + z_asym) * inp.r,
        r_bound=8.0 * math.sqrt(inp.n) * (1.0 + math.sqrt(2.0 * inp.t)) / math.sqrt(lam),
        mu3_bound=4.0 * math.sqrt(2.0) * inp.p / math.sqrt(lam),
    )
