import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wfbary.basis import (AliasingError, BasisSpec, FourierVec, constraint_grid, gram_operator,
                          project_density, reconstruct_density)


def test_p_counts():
    assert BasisSpec(1, 1.0, 4).p == 9
    assert BasisSpec(2, 1.0, 2).p == 25
    assert BasisSpec(3, 2.0, 1).p == 27


@pytest.mark.parametrize("dim,M,T", [(1, 5, 1.0), (1, 3, 2 * np.pi), (2, 2, 1.5)])
def test_orthonormal_under_gram_weight(dim, M, T):
    spec = BasisSpec(dim, T, M)
    m = 4 * M + 3
    pts = spec.grid(m)
    B = spec.evaluate(pts)
    gram = B.T @ B * spec.gram_weight * (T / m) ** dim
    assert np.allclose(gram, np.eye(spec.p), atol=1e-10)


def test_gram_diag_period_two_pi():
    # T = 2 pi: omega = 1, entries are k^2
    spec = BasisSpec(1, 2 * np.pi, 3)
    assert np.allclose(gram_operator(spec).diag, [0, 1, 1, 4, 4, 9, 9])


def test_gram_matches_quadrature_of_jacobians():
    spec = BasisSpec(2, 1.3, 2)
    m = 16
    J = spec.gradient(spec.grid(m))
    quad = np.einsum("jap,jaq->pq", J, J) * spec.gram_weight * (spec.period / m) ** 2
    assert np.allclose(quad, gram_operator(spec).matrix, atol=1e-8)


def test_jacobians_reproduce_kx():
    spec = BasisSpec(1, 1.0, 3)
    grid = constraint_grid(spec, 32)
    rng = np.random.default_rng(0)
    eta = rng.standard_normal(spec.p)
    direct = np.array([(J @ eta) @ (J @ eta) for J in grid.jacobians])
    assert np.allclose(grid.lipschitz_values(eta), direct)
    assert np.all(direct >= 0)


def test_zero_is_feasible_and_single_mode_box():
    spec = BasisSpec(1, 2.0, 1)
    grid = constraint_grid(spec, 64)
    assert grid.feasibility_residual(np.zeros(3)) == 0
    # |d/dx eta sqrt2 cos(wx)| <= 1  <=>  |eta| <= T / (2 pi sqrt 2)
    edge = spec.period / (2 * np.pi * np.sqrt(2))
    assert grid.feasibility_residual(np.array([0, edge * (1 - 1e-9), 0])) == 0
    assert grid.feasibility_residual(np.array([0, edge * 1.001, 0])) > 0


def test_grid_feasible_implies_gram_ellipsoid():
    spec = BasisSpec(1, 1.0, 4)
    grid = constraint_grid(spec, spec.n_axis)
    kd = gram_operator(spec).diag
    rng = np.random.default_rng(1)
    for _ in range(1000):
        eta = rng.standard_normal(spec.p) * rng.uniform(0.001, 0.2)
        worst = grid.lipschitz_values(eta).max()
        if worst > 0:
            eta = eta / np.sqrt(worst)  # on the boundary of the grid set
        assert eta @ (kd * eta) <= 1 + 1e-10


def test_coarse_grid_is_flagged():
    spec = BasisSpec(1, 1.0, 4)
    with pytest.warns(UserWarning):
        g = constraint_grid(spec, 5)
    assert g.under_resolved


def test_project_uniform_and_cosine():
    spec = BasisSpec(1, 3.0, 4)
    th = project_density(lambda x: np.full_like(x, 1 / 3.0), spec)
    assert np.allclose(th.coeffs, np.eye(9)[0], atol=1e-14)
    th = project_density(lambda x: (1 + np.cos(2 * np.pi * x / 3.0)) / 3.0, spec)
    # int (1/T) cos * sqrt2 cos = sqrt2 / 2
    expect = np.zeros(9)
    expect[0], expect[1] = 1.0, np.sqrt(2) / 2
    assert np.allclose(th.coeffs, expect, atol=1e-14)


def test_project_errors():
    spec = BasisSpec(1, 1.0, 4)
    with pytest.raises(AliasingError):
        project_density(lambda x: np.ones_like(x), spec, quadrature=8)
    with pytest.raises(ValueError):
        project_density(lambda x: np.where(x > 0.5, np.nan, 1.0), spec)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.floats(0.5, 4.0), st.integers(0, 2**32 - 1))
def test_project_reconstruct_roundtrip(dim, M, T, seed):
    spec = BasisSpec(dim, T, M)
    th = FourierVec(np.random.default_rng(seed).standard_normal(spec.p), spec)
    back = project_density(lambda x: reconstruct_density(th, x), spec, quadrature=2 * M + 3)
    assert np.allclose(back.coeffs, th.coeffs, atol=1e-10)


def test_parseval():
    spec = BasisSpec(1, 2.0, 5)
    th = FourierVec(np.random.default_rng(2).standard_normal(spec.p), spec)
    m = 64
    f = reconstruct_density(th, spec.grid(m)) / spec.gram_weight  # sum theta_k psi_k
    assert np.isclose(np.sum(f * f) * spec.gram_weight * spec.period / m, th.coeffs @ th.coeffs, rtol=1e-10)


def test_reconstruct_constant_mode():
    spec = BasisSpec(1, 2.5, 3)
    th = FourierVec(np.eye(spec.p)[0], spec)
    assert np.allclose(reconstruct_density(th, [0.1, 1.7]), 1 / 2.5)


def test_fouriervec_validation():
    spec = BasisSpec(1, 1.0, 2)
    with pytest.raises(ValueError):
        FourierVec(np.ones(4), spec)
    with pytest.raises(ValueError):
        FourierVec([1, 0, np.inf, 0, 0], spec)
    a = FourierVec(np.ones(5), spec)
    with pytest.raises(ValueError):
        a - FourierVec(np.ones(9), BasisSpec(1, 1.0, 4))
    with pytest.raises(ValueError):
        a.coeffs[0] = 2.0
