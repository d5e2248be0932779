"""Seeded randomized checks of the numerical building blocks."""

from __future__ import annotations

import numpy as np
import pytest
import scipy.linalg

from nodeshoot.network import RegSpec, mlp_forward, mlp_new, regularizer, spectral_norm
from nodeshoot.ode import OdeField, StepPlan, integrate_adaptive, integrate_fixed
from nodeshoot.optim import auglag_objective, penalty_objective
from nodeshoot.shooting import ShootingDecision, ShootingGrid, TimeSeries, evaluate, make_grid, partition, simulate
from nodeshoot.tape import fd_grad, grad, sumsq

SEEDS = range(30)
CASES = range(100)


def random_linear_system(seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    a = rng.normal(size=(n, n))
    a /= max(1.0, np.linalg.norm(a, 2))
    return a, rng.normal(size=n)


@pytest.mark.parametrize('seed', SEEDS)
def test_rk4_matches_the_matrix_exponential(seed):
    a, x0 = random_linear_system(seed)
    field = OdeField.from_autonomous(lambda x: a @ x, len(x0))
    trajectory = integrate_fixed(field, x0, (0.0, 1.0), StepPlan(0.01), [0.5, 1.0])

    np.testing.assert_allclose(trajectory.values()[0], scipy.linalg.expm(0.5 * a) @ x0, atol=1e-8)
    np.testing.assert_allclose(trajectory.values()[1], scipy.linalg.expm(a) @ x0, atol=1e-8)


@pytest.mark.parametrize('seed', SEEDS)
def test_adaptive_matches_the_matrix_exponential(seed):
    a, x0 = random_linear_system(seed)
    field = OdeField.from_autonomous(lambda x: a @ x, len(x0))
    trajectory = integrate_adaptive(field, x0, (0.0, 2.0), 1e-10, 1e-12, [1.0, 2.0])

    np.testing.assert_allclose(trajectory.values()[-1], scipy.linalg.expm(2.0 * a) @ x0, rtol=1e-7, atol=1e-9)


@pytest.mark.parametrize('seed', SEEDS)
def test_network_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 4)) for _ in range(int(rng.integers(2, 5)))]
    template = mlp_new(sizes, use_bias=bool(seed % 2), seed=seed)
    x = rng.normal(size=sizes[0])
    z = rng.normal(scale=0.5, size=template.n_params)

    def objective(vector):
        return sumsq(mlp_forward(template.unflatten(vector), x))

    value, gradient = grad(objective, z)
    assert value == pytest.approx(float(objective(z)), rel=1e-12)
    np.testing.assert_allclose(gradient, fd_grad(objective, z), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize('seed', SEEDS)
def test_spectral_norm_recovers_a_separated_spectrum(seed):
    rng = np.random.default_rng(seed)
    rows, cols = (int(v) for v in rng.integers(2, 7, size=2))
    k = min(rows, cols)
    u, _ = np.linalg.qr(rng.normal(size=(rows, k)))
    v, _ = np.linalg.qr(rng.normal(size=(cols, k)))
    top = float(rng.uniform(0.5, 3.0))
    singular = np.concatenate([[top], rng.uniform(0.0, 0.5 * top, size=k - 1)])
    w = u @ np.diag(singular) @ v.T

    assert float(spectral_norm(w)) == pytest.approx(top, rel=1e-8)


@pytest.mark.parametrize('kind', ['quadratic', 'l1', 'l2', 'linf'])
@pytest.mark.parametrize('seed', range(25))
def test_penalty_is_bounded_below_by_the_cost(seed, kind):
    rng = np.random.default_rng(seed)
    cost = float(rng.normal())
    defects = rng.normal(size=int(rng.integers(1, 8)))
    rho = float(rng.uniform(0.1, 100.0))

    value = float(penalty_objective(cost, defects, rho, kind))
    assert value > cost
    assert float(penalty_objective(cost, np.zeros_like(defects), rho, kind)) == pytest.approx(cost)
    # doubling the weight doubles the penalty term
    doubled = float(penalty_objective(cost, defects, 2.0 * rho, kind))
    assert doubled - cost == pytest.approx(2.0 * (value - cost), rel=1e-9)

    def objective(h):
        return penalty_objective(cost, h, rho, kind)

    _, gradient = grad(objective, defects)
    np.testing.assert_allclose(gradient, fd_grad(objective, defects), rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize('seed', CASES)
def test_zero_multipliers_reduce_to_the_quadratic_penalty(seed):
    rng = np.random.default_rng(seed)
    cost = float(rng.normal())
    defects = rng.normal(size=int(rng.integers(1, 8)))
    rho = float(rng.uniform(0.0, 50.0))

    assert float(auglag_objective(cost, defects, np.zeros_like(defects), rho)) == pytest.approx(
        float(penalty_objective(cost, defects, rho, 'quadratic')), rel=1e-12
    )


@pytest.mark.parametrize('seed', CASES)
def test_auglag_derivatives_in_the_multipliers_and_weight(seed):
    rng = np.random.default_rng(seed)
    cost = float(rng.normal())
    defects = rng.normal(size=int(rng.integers(1, 8)))
    n = len(defects)
    point = np.concatenate([rng.normal(size=n), [rng.uniform(0.0, 50.0)]])

    def objective(vr):
        return auglag_objective(cost, defects, vr[:n], vr[n])

    _, gradient = grad(objective, point)
    np.testing.assert_allclose(gradient[:n], defects, rtol=1e-12, atol=1e-12)
    assert gradient[n] == pytest.approx(float(defects @ defects), rel=1e-12)


@pytest.mark.parametrize('seed', SEEDS)
def test_regularizer_scaling_and_frobenius_bound(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 7)) for _ in range(int(rng.integers(2, 5)))]
    params = mlp_new(sizes, seed=seed)
    c = float(rng.uniform(0.1, 5.0))
    scaled = params.scaled(c)

    spectral = float(regularizer(params, RegSpec('spectral_sum', 1.0)))
    l2 = float(regularizer(params, RegSpec('l2', 1.0)))
    assert float(regularizer(scaled, RegSpec('spectral_sum', 1.0))) == pytest.approx(c * spectral, rel=1e-9)
    assert float(regularizer(scaled, RegSpec('l2', 1.0))) == pytest.approx(c * c * l2, rel=1e-12)

    for w in params.weights:
        assert float(spectral_norm(w)) <= np.linalg.norm(w, 'fro') * (1.0 + 1e-12)


def random_series(rng: np.random.Generator) -> TimeSeries:
    n = int(rng.integers(4, 13))
    times = np.cumsum(np.concatenate([[0.0], rng.uniform(0.05, 0.4, size=n - 1)]))
    return TimeSeries(times, rng.normal(size=(n, 2)))


def random_grid(rng: np.random.Generator, series: TimeSeries) -> ShootingGrid:
    """Boundaries on a random subset of the sample times, ends included."""
    inner = rng.choice(series.times[1:-1], size=int(rng.integers(0, len(series) - 1)), replace=False)
    return ShootingGrid(np.sort(np.concatenate([series.times[[0, -1]], inner])))


def network_builder(theta):
    return OdeField.from_autonomous(lambda x: mlp_forward(theta, x), 2)


@pytest.mark.parametrize('seed', CASES)
def test_bias_free_network_fixes_the_origin(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 9)) for _ in range(int(rng.integers(2, 6)))]
    template = mlp_new(sizes, use_bias=False, seed=seed)
    theta = template.unflatten(rng.normal(scale=3.0, size=template.n_params))

    output = mlp_forward(theta, np.zeros(sizes[0]))
    assert output.shape == (sizes[-1],)
    assert not np.any(output)


@pytest.mark.parametrize('seed', CASES)
def test_partition_counts_every_sample_once(seed):
    rng = np.random.default_rng(seed)
    series = random_series(rng)
    if seed % 2:
        grid = random_grid(rng, series)
    else:
        grid = make_grid(series.span, int(rng.integers(1, 2 * len(series))), series.times, snap=False)

    owners = partition(grid, series)
    assert len(owners) == grid.n_intervals
    assert np.concatenate(owners).tolist() == list(range(len(series)))


@pytest.mark.parametrize('seed', CASES)
def test_one_interval_is_single_shooting(seed):
    rng = np.random.default_rng(seed)
    series = random_series(rng)
    theta = mlp_new([2, 4, 2], seed=seed)
    x0 = rng.normal(size=2)
    plan = StepPlan(float(rng.uniform(0.05, 0.3)))

    decision = ShootingDecision(theta, x0[None, :])
    result = evaluate(network_builder, decision, ShootingGrid(series.span), series, RegSpec('none'), plan)
    trajectory = simulate(network_builder(theta), x0, series.times, plan=plan)
    assert float(result.cost) == pytest.approx(float(np.sum((trajectory.values() - series.values) ** 2)), rel=1e-12)
    assert len(result.defects) == 0


@pytest.mark.parametrize('seed', CASES)
def test_states_on_the_trajectory_are_continuous(seed):
    rng = np.random.default_rng(seed)
    series = random_series(rng)
    theta = mlp_new([2, 4, 2], seed=seed)
    x0 = rng.normal(size=2)
    plan = StepPlan(float(rng.uniform(0.05, 0.3)))
    grid = random_grid(rng, series)

    trajectory = simulate(network_builder(theta), x0, series.times, plan=plan.with_boundaries(grid.boundaries))
    states = np.stack([trajectory.state_at(t) for t in grid.boundaries[:-1]])
    result = evaluate(network_builder, ShootingDecision(theta, states), grid, series, RegSpec('none'), plan)

    assert result.defects.max_abs() == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(result.stitched.values(), trajectory.values(), atol=1e-12)
