import numpy as np
import pytest

from fex.optimize import OptimizerConfig, adam_minimize, bfgs_minimize, coarse_tune


def quadratic(theta):
    r = theta - 1.0
    return float(r @ r), 2.0 * r


def rosenbrock(theta):
    x, y = theta
    val = (1 - x) ** 2 + 100 * (y - x * x) ** 2
    grad = np.array(
        [-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)]
    )
    return float(val), grad


def test_adam_quadratic_reaches_optimum():
    theta, val = adam_minimize(quadratic, np.zeros(4), steps=500, lr=1e-2)
    assert np.linalg.norm(theta - 1.0) <= 1e-3
    assert val <= 1e-6


def test_adam_zero_steps_is_noop():
    theta0 = np.array([0.3, -0.7])
    theta, val = adam_minimize(quadratic, theta0, steps=0, lr=1e-2)
    np.testing.assert_array_equal(theta, theta0)
    assert val == pytest.approx(quadratic(theta0)[0])


def test_adam_recovers_linear_regression():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((200, 5))
    w_true = rng.standard_normal(5)
    y = X @ w_true

    def f(w):
        r = X @ w - y
        return float(r @ r) / len(y), 2.0 * (X.T @ r) / len(y)

    w, _ = adam_minimize(f, np.zeros(5), steps=2000, lr=1e-2)
    assert np.max(np.abs(w - w_true)) <= 1e-4


def test_adam_nonfinite_start_fails_cleanly():
    def bad(theta):
        return np.inf, np.zeros_like(theta)

    theta, val = adam_minimize(bad, np.ones(2), steps=10, lr=1e-2)
    assert val == np.inf
    np.testing.assert_array_equal(theta, np.ones(2))


def test_adam_returns_best_seen_not_last():
    # crafted oscillation: value spikes when theta moves past the optimum
    calls = []

    def f(theta):
        calls.append(theta.copy())
        return quadratic(theta)

    theta, val = adam_minimize(f, np.array([0.0]), steps=50, lr=0.9)
    assert val <= min(quadratic(c)[0] for c in calls) + 1e-15


def test_bfgs_rosenbrock():
    theta, val = bfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), steps=100)
    assert val <= 1e-8
    assert np.linalg.norm(theta - 1.0) <= 1e-3


def test_bfgs_quadratic_terminates_fast():
    # moderately conditioned so unit Armijo steps are accepted and the
    # inverse-Hessian approximation becomes exact along the explored subspace
    rng = np.random.default_rng(0)
    n = 6
    A = rng.standard_normal((n, n))
    Q = A @ A.T / (2 * n) + 0.7 * np.eye(n)
    b = rng.standard_normal(n)

    def f(theta):
        return float(0.5 * theta @ Q @ theta - b @ theta), Q @ theta - b

    opt = np.linalg.solve(Q, b)
    fopt = f(opt)[0]
    theta, val = bfgs_minimize(f, np.zeros(n), steps=n + 2)
    assert val - fopt <= 1e-10


def test_bfgs_zero_steps_is_noop():
    theta0 = np.array([2.0, 3.0])
    theta, val = bfgs_minimize(quadratic, theta0, steps=0)
    np.testing.assert_array_equal(theta, theta0)


def test_bfgs_hessian_stays_symmetric_and_positive_definite():
    from fex import optimize

    rng = np.random.default_rng(2)
    n = 5
    A = rng.standard_normal((n, n))
    Q = A @ A.T + 0.5 * np.eye(n)
    H = np.eye(n)
    theta = rng.standard_normal(n)
    for _ in range(30):
        g = Q @ theta
        d = -(H @ g)
        theta_new = theta + 0.9 * d
        s = theta_new - theta
        y = Q @ theta_new - g
        if s @ y > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            H = optimize._bfgs_update(H, s, y)
        theta = theta_new
        assert np.max(np.abs(H - H.T)) <= 1e-10
        assert np.min(np.linalg.eigvalsh(H)) > 0


def test_coarse_tune_runs_adam_then_bfgs():
    cfg = OptimizerConfig(adam_steps=100, adam_lr=1e-1, bfgs_steps=20, restarts=1)
    theta, val = coarse_tune(quadratic, [np.zeros(3)], cfg)
    assert val <= 1e-12


def test_coarse_tune_returns_best_of_restarts():
    cfg = OptimizerConfig(adam_steps=30, adam_lr=1e-2, bfgs_steps=5, restarts=2)

    starts = [np.full(2, 10.0), np.full(2, 1.1)]
    theta_a, val_a = coarse_tune(quadratic, [starts[0]], cfg)
    theta_b, val_b = coarse_tune(quadratic, [starts[1]], cfg)
    theta, val = coarse_tune(quadratic, starts, cfg)
    assert val == pytest.approx(min(val_a, val_b))
    np.testing.assert_array_equal(theta, theta_a if val_a <= val_b else theta_b)


def test_coarse_tune_monotone_best_so_far():
    cfg = OptimizerConfig(adam_steps=10, adam_lr=1e-3, bfgs_steps=2, restarts=1)
    theta0 = np.array([5.0, 5.0])
    _, val = coarse_tune(quadratic, [theta0], cfg)
    assert val <= quadratic(theta0)[0]


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(adam_steps=-1)
    with pytest.raises(ValueError):
        OptimizerConfig(adam_lr=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(restarts=0)
