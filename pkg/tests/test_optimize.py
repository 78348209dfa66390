import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from qpi.errors import NumericFailure
from qpi.model import matrix_power
from qpi.optimize import (directional_power_derivative, gauss_newton, gauss_newton_step,
                          kron_gram, kron_rhs, power_with_derivative,
                          powers_with_derivatives)


def central_difference(f, T, h=1e-6):
    d = T.shape[0]
    out = []
    for j in range(d * d):
        E = np.zeros(d * d)
        E[j] = h
        E = E.reshape(d, d)
        out.append((f(T + E) - f(T - E)) / (2 * h))
    return np.array(out)


@pytest.mark.parametrize("n", [1, 2, 7])
def test_bilinear_power_jacobian(n):
    rng = np.random.default_rng(n)
    d = 4
    T = rng.normal(size=(d, d)) / 2
    A = rng.normal(size=(5, d))
    B = rng.normal(size=(d, 3))
    _, D = power_with_derivative(T, n)
    analytic = np.einsum("pa,jab,bq->jpq", A, D, B)
    numeric = central_difference(lambda X: A @ matrix_power(X, n) @ B, T)
    rel = np.abs(analytic - numeric).max() / np.abs(numeric).max()
    assert rel < 1e-5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(0, 12), d=st.integers(1, 5))
def test_directional_derivative_identity(seed, n, d):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(d, d)) / np.sqrt(d)
    E = rng.normal(size=(d, d))
    _, D = power_with_derivative(T, n)
    from_tensor = np.tensordot(E.ravel(), D, axes=1)
    assert_allclose(from_tensor, directional_power_derivative(T, E, n), atol=1e-10,
                    rtol=1e-10)


def test_directional_derivative_matches_finite_difference():
    rng = np.random.default_rng(1)
    T = rng.normal(size=(3, 3)) / 2
    E = rng.normal(size=(3, 3))
    h = 1e-6
    fd = (matrix_power(T + h * E, 9) - matrix_power(T - h * E, 9)) / (2 * h)
    exact = directional_power_derivative(T, E, 9)
    assert np.abs(fd - exact).max() / np.abs(exact).max() < 1e-5


def test_powers_with_derivatives_consistent():
    T = np.random.default_rng(2).normal(size=(3, 3)) / 2
    many = powers_with_derivatives(T, [0, 3, 4, 9, 9, 33])
    for n, (X, D) in many.items():
        X1, D1 = power_with_derivative(T, n)
        assert_allclose(X, X1, atol=1e-12)
        assert_allclose(D, D1, atol=1e-12)


def test_kron_gram_identity():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(6, 2)), rng.normal(size=(3, 5))
    W = rng.uniform(0.5, 2, size=(6, 5))
    X = rng.normal(size=(2, 3))
    G = kron_gram(A, B, W)
    assert X.ravel() @ G @ X.ravel() == pytest.approx(np.sum(W * (A @ X @ B) ** 2))
    R = rng.normal(size=(6, 5))
    assert kron_rhs(A, B, W, R) @ X.ravel() == pytest.approx(np.sum(W * R * (A @ X @ B)))


def linear_problem(seed=0):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(20, 4))
    y = rng.normal(size=20)
    objective = lambda x: float(np.sum((J @ x - y) ** 2))
    evaluate = lambda x: (objective(x), 2 * J.T @ (J @ x - y), 2 * J.T @ J)
    return J, y, objective, evaluate


def test_single_step_solves_linear_least_squares():
    J, y, objective, evaluate = linear_problem()
    x0 = np.zeros(4)
    f, g, H = evaluate(x0)
    x1, f1, predicted = gauss_newton_step(f, g, H, x0, objective, mu=0.0)
    best = np.linalg.lstsq(J, y, rcond=None)[0]
    assert_allclose(x1, best, atol=1e-10)
    assert predicted == pytest.approx(f - f1, rel=1e-8)


def test_gauss_newton_converges_on_linear_problem():
    J, y, objective, evaluate = linear_problem(1)
    res = gauss_newton(evaluate, objective, np.ones(4))
    assert res.status == "converged"
    assert res.iterations <= 3
    assert_allclose(res.x, np.linalg.lstsq(J, y, rcond=None)[0], atol=1e-8)


def test_gauss_newton_monotone_on_nonlinear_problem():
    # fit y = exp(-k t) * a with parameters (a, k)
    t = np.linspace(0, 3, 30)
    y = 2.0 * np.exp(-0.7 * t)

    def residual(x):
        return x[0] * np.exp(-x[1] * t) - y

    def evaluate(x):
        r = residual(x)
        J = np.stack([np.exp(-x[1] * t), -x[0] * t * np.exp(-x[1] * t)], axis=1)
        return float(r @ r), 2 * J.T @ r, 2 * J.T @ J

    res = gauss_newton(evaluate, lambda x: float(residual(x) @ residual(x)), [1.0, 0.1],
                       max_iter=100)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
    assert_allclose(res.x, [2.0, 0.7], atol=1e-6)


def test_non_finite_jacobian_is_numeric_failure():
    with pytest.raises(NumericFailure):
        gauss_newton_step(1.0, np.array([np.nan]), np.eye(1), np.zeros(1), lambda x: 0.0, 0.0)
