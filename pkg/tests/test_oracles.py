import numpy as np
import pytest

from wfbary.densities import Uniform1D
from wfbary.oracles import (DiscreteMeasure, circle_points, circle_w1, circles_w2, discrete_ot_w1, gaussian_w2,
                            grid_measure, network_simplex_cost, quantile_barycenter_1d, quantile_w1_1d)


def _random_measure(rng, k, dim=1):
    return DiscreteMeasure.normalized(rng.uniform(0, 1, (k, dim)), rng.uniform(0.1, 1, k))


def test_weights_validated():
    with pytest.raises(ValueError):
        DiscreteMeasure([0.0, 1.0], [0.7, 0.4])
    with pytest.raises(ValueError):
        DiscreteMeasure([0.0, 1.0], [1.5, -0.5])


def test_point_masses_and_identity():
    a = DiscreteMeasure([0.0], [1.0])
    b = DiscreteMeasure([0.37], [1.0])
    assert discrete_ot_w1(a, b) == pytest.approx(0.37)
    assert discrete_ot_w1(a, a) == 0.0


def test_uniform_grids_shifted_by_half():
    x = (np.arange(128) + 0.5) / 128
    a = DiscreteMeasure(x, np.full(128, 1 / 128))
    b = DiscreteMeasure(x + 0.5, np.full(128, 1 / 128))
    assert discrete_ot_w1(a, b) == pytest.approx(0.5, abs=1 / 128)


def test_cdf_formula_agrees_with_network_simplex():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = _random_measure(rng, 30), _random_measure(rng, 40)
        val = discrete_ot_w1(a, b, cross_check=False)
        assert abs(val - network_simplex_cost(a, b)) <= 1e-10


def test_circle_formula_agrees_with_network_simplex():
    rng = np.random.default_rng(4)
    for _ in range(30):
        a, b = _random_measure(rng, 25), _random_measure(rng, 35)
        assert abs(circle_w1(a, b, 1.0) - network_simplex_cost(a, b, 1.0, 1.0)) <= 1e-10


def test_metric_axioms():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b, c = (_random_measure(rng, 12, 2) for _ in range(3))
        ab, ba = discrete_ot_w1(a, b), discrete_ot_w1(b, a)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert ab <= discrete_ot_w1(a, c) + discrete_ot_w1(c, b) + 1e-12
        assert discrete_ot_w1(a, a) <= 1e-10


def test_atom_cap():
    big = DiscreteMeasure(np.linspace(0, 1, 3000), np.full(3000, 1 / 3000))
    with pytest.raises(ValueError):
        network_simplex_cost(big, big)


def test_grid_measure_of_uniform():
    m = grid_measure(Uniform1D(0.0, 0.5), 8)
    assert np.allclose(m.weights, [0.25] * 4 + [0] * 4)


def test_quantile_formulas():
    q = lambda s: s
    assert quantile_w1_1d(q, q) == 0
    assert quantile_w1_1d(q, lambda s: s + 0.3) == pytest.approx(0.3)
    assert quantile_w1_1d(q, lambda s: 2 * s) == pytest.approx(0.5, abs=1e-12)


def test_quantile_barycenter():
    qb = quantile_barycenter_1d([lambda s: s, lambda s: 2 + s])
    s = np.linspace(0, 1, 11)
    assert np.allclose(qb(s), 1 + s)
    fs = [lambda s: s, lambda s: s**2, lambda s: 3 * s]
    assert np.allclose(quantile_barycenter_1d(fs)(s), quantile_barycenter_1d(fs[::-1])(s))
    assert np.allclose(quantile_barycenter_1d([fs[1]] * 3)(s), s**2)


def test_circles_closed_form():
    assert circles_w2(0, 1, 3, 5) == 5.0
    assert circles_w2((1, 2), 1, (1, 2), 1) == 0.0


def test_circles_vs_discrete_ot():
    a = circle_points((0.0, 0.0), 1.0, 512)
    b = circle_points((3.0, 0.0), 5.0, 512)
    w2 = np.sqrt(network_simplex_cost(a, b, power=2.0))
    assert w2 == pytest.approx(circles_w2((0, 0), 1, (3, 0), 5), rel=0.01)


def test_gaussian_w2():
    assert gaussian_w2(1.0, 4.0) == 1.0
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert gaussian_w2(S, S) == pytest.approx(0.0, abs=1e-7)
    d1, d2 = np.array([1.0, 4.0]), np.array([9.0, 0.25])
    assert gaussian_w2(np.diag(d1), np.diag(d2)) == pytest.approx(np.linalg.norm(np.sqrt(d1) - np.sqrt(d2)))
    with pytest.raises(ValueError):
        gaussian_w2(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2))
