import numpy as np
import pytest

from wfbary.barycenter import BarycenterOptions, objective, solve_barycenter
from wfbary.basis import BasisSpec, FourierVec, constraint_grid
from wfbary.densities import Uniform1D, WrappedGaussian1D, coefficients

SPEC = BasisSpec(1, 1.0, 4)
GRID = constraint_grid(SPEC, 96)
EPS = 1e-2


def _inputs(rng, n):
    return [coefficients(WrappedGaussian1D(rng.uniform(0, 1), rng.uniform(0.08, 0.2)), SPEC) for _ in range(n)]


def test_identical_inputs_return_the_input():
    th = coefficients(Uniform1D(0.2, 0.4), SPEC)
    res = solve_barycenter([th] * 4, EPS, GRID)
    assert res.converged
    assert np.allclose(res.theta_hat.coeffs, th.coeffs, atol=1e-10)
    assert res.objective == pytest.approx(0.0, abs=1e-14)


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    xs = _inputs(rng, 5)
    a = solve_barycenter(xs, EPS, GRID)
    b = solve_barycenter([xs[i] for i in rng.permutation(5)], EPS, GRID)
    assert np.allclose(a.theta_hat.coeffs, b.theta_hat.coeffs, atol=1e-6)
    assert a.objective == pytest.approx(b.objective, rel=1e-9)


def test_minimum_beats_every_input_and_history_descends():
    rng = np.random.default_rng(1)
    xs = _inputs(rng, 6)
    res = solve_barycenter(xs, EPS, GRID)
    assert res.converged and res.grad_norm <= 6e-6
    for x in xs:
        assert res.objective <= objective(x, xs, EPS, GRID) + 1e-12
    assert np.all(np.diff(res.history) <= 1e-15)
    assert res.theta_hat.coeffs[0] == pytest.approx(1.0)


def test_random_perturbations_do_not_improve():
    rng = np.random.default_rng(2)
    xs = _inputs(rng, 4)
    res = solve_barycenter(xs, EPS, GRID)
    for _ in range(20):
        v = rng.standard_normal(SPEC.p) * 1e-3
        v[0] = 0.0
        trial = FourierVec(res.theta_hat.coeffs + v, SPEC)
        assert objective(trial, xs, EPS, GRID) >= res.objective - 1e-10


def test_newton_and_gradient_descent_agree():
    rng = np.random.default_rng(3)
    xs = _inputs(rng, 3)
    a = solve_barycenter(xs, EPS, GRID)
    b = solve_barycenter(xs, EPS, GRID, BarycenterOptions(method="gradient", tol_grad=1e-7, max_outer=20000))
    assert b.objective == pytest.approx(a.objective, rel=1e-6, abs=1e-12)
    assert a.iterations <= b.iterations


def test_two_measures_in_the_quadratic_regime_average():
    # for tiny perturbations every l is the quadratic |K^-1/2 delta|^2 / (4 eps), so theta_hat is the mean
    base = np.eye(SPEC.p)[0]
    rng = np.random.default_rng(4)
    xs = []
    for _ in range(3):
        v = base + np.r_[0.0, rng.standard_normal(SPEC.p - 1) * 1e-5]
        xs.append(FourierVec(v, SPEC))
    res = solve_barycenter(xs, EPS, GRID, BarycenterOptions(tol_grad=1e-12))
    assert np.allclose(res.theta_hat.coeffs, np.mean([x.coeffs for x in xs], axis=0), atol=1e-12)


def test_rejects_unequal_masses_and_bad_method():
    a = coefficients(Uniform1D(0.0, 0.5), SPEC)
    b = FourierVec(a.coeffs * 2, SPEC)
    with pytest.raises(ValueError):
        solve_barycenter([a, b], EPS, GRID)
    c = coefficients(Uniform1D(0.3, 0.5), SPEC)
    with pytest.raises(ValueError):
        solve_barycenter([a, c], EPS, GRID, BarycenterOptions(method="bfgs"))
