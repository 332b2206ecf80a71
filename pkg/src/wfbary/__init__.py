"""Regularised W1 barycenters in a truncated Fourier basis and diagnostics
of their Gaussian approximation."""

from .basis import (AliasingError, BasisSpec, ConstraintGrid, FourierVec, GramOperator, constraint_grid,
                    gram_operator, project_density, reconstruct_density)
from .dual import DualOptions, DualSolution, NonConverged, distance, gradient, hessian_active, hessian_fd, solve_dual
from .barycenter import BarycenterOptions, BarycenterResult, objective, solve_barycenter
from .fisher import FisherEstimate, breve_grad, estimate_fisher, schur_breve
from .bounds import BoundInputs, BoundReport, ball_entropy_integrals, compute_bounds, ellipsoid_entropy_pD

__all__ = [
    "AliasingError", "BasisSpec", "ConstraintGrid", "FourierVec", "GramOperator", "constraint_grid",
    "gram_operator", "project_density", "reconstruct_density",
    "DualOptions", "DualSolution", "NonConverged", "distance", "gradient", "hessian_active", "hessian_fd",
    "solve_dual", "BarycenterOptions", "BarycenterResult", "objective", "solve_barycenter",
    "FisherEstimate", "breve_grad", "estimate_fisher", "schur_breve",
    "BoundInputs", "BoundReport", "ball_entropy_integrals", "compute_bounds", "ellipsoid_entropy_pD",
]

__version__ = "0.1.0"
