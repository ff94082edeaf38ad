import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from otsi.core import PointCloud
from otsi.costs import (MLP_VERSION, POLY_ORDER, MlpCostModel, PolyCostModel, cost_matrix,
                        cost_matrix_grad, default_init, euclidean_init, load_model,
                        model_from_json, model_to_json, monomial_exponents, monomial_vector,
                        n_monomials, save_model)
from otsi.errors import InstanceError, SchemaError


def brute_poly(theta, x, y):
    """Expand the polynomial one monomial at a time, from exponent vectors."""
    z = list(x) + list(y)
    D = len(z)
    exps = [tuple(int(i == k) for i in range(D)) for k in range(D)]
    exps += [tuple(int(i == k) + int(i == l) for i in range(D))
             for k in range(D) for l in range(k, D)]
    total = 0.0
    for t, e in zip(theta, exps):
        term = t
        for zi, p in zip(z, e):
            term *= zi ** p
        total += term
    return total


def fd_grad(f, theta, h):
    g = np.zeros_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


# -------------------------------------------------------------- polynomial

@pytest.mark.parametrize("dx,dy", [(1, 1), (2, 2), (3, 2), (5, 1)])
def test_monomial_count_formula(dx, dy):
    D = dx + dy
    count = sum(1 for _ in itertools.combinations_with_replacement(range(D), 1)) + \
        sum(1 for _ in itertools.combinations_with_replacement(range(D), 2))
    assert n_monomials(dx, dy) == count == D + D * (D + 1) // 2
    assert len(monomial_exponents(dx, dy)) == count
    assert PolyCostModel((dx, dy)).theta.shape == (count,)


def test_monomial_order_is_linear_then_lexicographic_pairs():
    assert monomial_exponents(1, 1) == [(0, -1), (1, -1), (0, 0), (0, 1), (1, 1)]
    np.testing.assert_array_equal(monomial_vector([2.0], [3.0]), [2, 3, 4, 6, 9])


def test_euclidean_examples():
    m2 = euclidean_init(2)
    assert cost_matrix(m2, np.array([[1.0, 2.0]]), np.array([[3.0, 1.0]])).values[0, 0] == 5.0
    m1 = euclidean_init(1)
    for a in (-3.5, 0.0, 1e3):
        assert cost_matrix(m1, np.array([[a]]), np.array([[a]])).values[0, 0] == 0.0


def test_euclidean_matches_loop(rng):
    m = euclidean_init(3)
    x, y = rng.standard_normal(3), rng.standard_normal(3)
    loop = sum((x[k] - y[k]) ** 2 for k in range(3))
    assert cost_matrix(m, x[None], y[None]).values[0, 0] == pytest.approx(loop, abs=1e-12)


@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_euclidean_equivalence(d, n, m, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((n, d)), rng.standard_normal((m, d))
    C = cost_matrix(euclidean_init(d), PointCloud(X), PointCloud(Y)).values
    D2 = ((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
    np.testing.assert_allclose(C, D2, atol=1e-10)


def test_euclidean_zero_diagonal_on_identical_clouds(rng):
    X = rng.standard_normal((6, 2))
    C = cost_matrix(euclidean_init(2), X, X).values
    np.testing.assert_allclose(np.diag(C), 0.0, atol=1e-12)


def test_single_monomial_reads_one_coordinate(rng):
    th = np.zeros(n_monomials(2, 2))
    th[0] = 1.0  # x_1
    X, Y = rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    C = cost_matrix(PolyCostModel((2, 2), th), X, Y).values
    np.testing.assert_array_equal(C, np.repeat(X[:, :1], 3, axis=1))


def test_matches_brute_force_expansion(rng):
    dx, dy = 2, 3
    th = rng.standard_normal(n_monomials(dx, dy))
    X, Y = rng.standard_normal((4, dx)), rng.standard_normal((3, dy))
    C = cost_matrix(PolyCostModel((dx, dy), th), X, Y).values
    oracle = np.array([[brute_poly(th, x, y) for y in Y] for x in X])
    np.testing.assert_allclose(C, oracle, atol=1e-10)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_poly_linear_in_theta(a, b, seed):
    rng = np.random.default_rng(seed)
    p = n_monomials(2, 1)
    t1, t2 = rng.standard_normal(p), rng.standard_normal(p)
    X, Y = rng.standard_normal((3, 2)), rng.standard_normal((4, 1))
    m = PolyCostModel((2, 1))
    lhs = cost_matrix(m.with_theta(a * t1 + b * t2), X, Y).values
    rhs = a * cost_matrix(m.with_theta(t1), X, Y).values + b * cost_matrix(m.with_theta(t2), X, Y).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))


def test_poly_grad_of_indicator_is_monomial_vector(rng):
    X, Y = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
    U = np.zeros((3, 4))
    U[1, 2] = 1.0
    g = cost_matrix_grad(euclidean_init(2), X, Y, U)
    np.testing.assert_allclose(g, monomial_vector(X[1], Y[2]), atol=1e-14)


@pytest.mark.parametrize("family", ["poly", "mlp"])
def test_zero_upstream_gives_zero_gradient(family, rng):
    model = default_init(family, (2, 3), seed=1)
    X, Y = rng.standard_normal((3, 2)), rng.standard_normal((4, 3))
    assert not np.any(cost_matrix_grad(model, X, Y, np.zeros((3, 4))))


@pytest.mark.parametrize("family", ["poly", "mlp"])
def test_gradient_matches_finite_differences(family):
    # 20+ random probes per family
    for seed in range(20):
        rng = np.random.default_rng(seed)
        dx, dy = rng.integers(1, 4, 2)
        model = default_init(family, (dx, dy), seed=seed, hidden=(7, 3)) if family == "mlp" \
            else PolyCostModel((dx, dy), rng.standard_normal(n_monomials(dx, dy)))
        X, Y = rng.standard_normal((4, dx)), rng.standard_normal((3, dy))
        U = rng.standard_normal((4, 3))
        g = cost_matrix_grad(model, X, Y, U)
        fd = fd_grad(lambda t: np.sum(U * cost_matrix(model.with_theta(t), X, Y).values),
                     model.theta, 1e-5)
        rel = np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12)
        assert rel < 1e-5


def test_gradient_upstream_shape_checked(rng):
    with pytest.raises(InstanceError):
        cost_matrix_grad(euclidean_init(2), np.zeros((3, 2)), np.zeros((2, 2)), np.zeros((2, 3)))


def test_dimension_mismatch():
    with pytest.raises(InstanceError):
        cost_matrix(euclidean_init(2), np.zeros((3, 3)), np.zeros((3, 2)))
    with pytest.raises(InstanceError):
        PolyCostModel((2, 2), np.zeros(3))


# -------------------------------------------------------------------- mlp

def test_mlp_architecture_and_determinism():
    m = MlpCostModel((13, 13))
    shapes = m.layer_shapes()
    assert shapes == [(100, 26), (100,), (5, 100), (5,), (1, 5), (1,)]
    assert m.theta.size == 26 * 100 + 100 + 500 + 5 + 5 + 1
    np.testing.assert_array_equal(m.theta, MlpCostModel((13, 13)).theta)
    assert not np.array_equal(m.theta, MlpCostModel((13, 13), seed=1).theta)


def test_mlp_fan_in_uniform_bounds():
    m = MlpCostModel((3, 2), hidden=(50, 5))
    for (w, b), fan_in in zip(zip(m.unpack()[0::2], m.unpack()[1::2]), (5, 50, 5)):
        bound = 1.0 / np.sqrt(fan_in)
        assert np.abs(w).max() <= bound and np.abs(b).max() <= bound


def test_mlp_forward_matches_manual(rng):
    m = MlpCostModel((2, 1), hidden=(4, 3), seed=3)
    W1, b1, W2, b2, W3, b3 = m.unpack()
    x, y = rng.standard_normal(2), rng.standard_normal(1)
    z = np.concatenate([x, y])
    manual = (W3 @ np.tanh(W2 @ np.tanh(W1 @ z + b1) + b2) + b3)[0]
    assert cost_matrix(m, x[None], y[None]).values[0, 0] == pytest.approx(manual, abs=1e-13)


def test_mlp_softplus_option(rng):
    m = MlpCostModel((1, 1), hidden=(3, 2), activation="softplus")
    X, Y = rng.standard_normal((2, 1)), rng.standard_normal((2, 1))
    U = rng.standard_normal((2, 2))
    fd = fd_grad(lambda t: np.sum(U * cost_matrix(m.with_theta(t), X, Y).values), m.theta, 1e-5)
    np.testing.assert_allclose(cost_matrix_grad(m, X, Y, U), fd, atol=1e-8)
    with pytest.raises(SchemaError):
        MlpCostModel((1, 1), activation="relu6")


# --------------------------------------------------------- serialization

@pytest.mark.parametrize("model", [euclidean_init(3), MlpCostModel((2, 2), hidden=(6, 2), seed=4)])
def test_json_round_trip(model, tmp_path, rng):
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    assert back.family == model.family and back.dims == model.dims
    np.testing.assert_array_equal(back.theta, model.theta)
    X = rng.standard_normal((3, model.dims[0]))
    np.testing.assert_array_equal(cost_matrix(back, X, X).values, cost_matrix(model, X, X).values)


def test_json_carries_version_tags():
    assert json.loads(model_to_json(euclidean_init(1)))["format"] == POLY_ORDER
    assert json.loads(model_to_json(MlpCostModel((1, 1))))["format"] == MLP_VERSION


def test_version_mismatch_is_schema_error():
    doc = json.loads(model_to_json(euclidean_init(1)))
    doc["format"] = "deg1-2-lex-v0"
    with pytest.raises(SchemaError, match="format"):
        model_from_json(json.dumps(doc))
    with pytest.raises(SchemaError):
        model_from_json("not json")
    with pytest.raises(SchemaError):
        model_from_json('{"family": "spline"}')
