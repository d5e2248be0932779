from __future__ import annotations

import math

import numpy as np
import pytest

from nodeshoot.errors import IntegrationError, InvalidInput
from nodeshoot.ode import OdeField, StepPlan, integrate_adaptive, integrate_fixed, rk4_step
from nodeshoot.problems.spiral import spiral_truth
from nodeshoot.tape import fd_grad, grad, sumsq


@pytest.fixture
def decay() -> OdeField:
    return OdeField.from_autonomous(lambda x: -x, 1)


@pytest.fixture
def oscillator() -> OdeField:
    return OdeField.from_autonomous(lambda x: np.array([x[1], -x[0]]), 2)


def test_rk4_step_on_decay(decay):
    # the classical stages reproduce the degree-four Taylor polynomial of exp(-h)
    x = rk4_step(decay, np.array([1.0]), 0.0, 0.1)
    expected = 1 - 0.1 + 0.1**2 / 2 - 0.1**3 / 6 + 0.1**4 / 24
    assert x[0] == pytest.approx(expected, rel=1e-14)


def test_rk4_rejects_non_positive_step(decay):
    with pytest.raises(InvalidInput):
        rk4_step(decay, np.array([1.0]), 0.0, 0.0)


def test_rk4_raises_on_blow_up():
    field = OdeField.from_autonomous(lambda x: x * np.inf, 1)
    with pytest.raises(IntegrationError) as excinfo:
        rk4_step(field, np.array([1.0]), 2.5, 0.1)
    assert excinfo.value.time == 2.5


def test_step_sequence_lands_on_landmarks():
    plan = StepPlan(0.3, boundaries=[1.0])
    times = plan.step_times(0.0, 2.0, landmarks=[0.5])
    assert times[0] == 0.0 and times[-1] == 2.0
    assert 0.5 in times and 1.0 in times
    assert np.all(np.diff(times) > 0)
    assert np.all(np.diff(times) <= 0.3 + 1e-12)


def test_step_sequence_is_deterministic():
    plan = StepPlan(0.05)
    first = plan.step_times(0.0, 6.0)
    second = plan.step_times(0.0, 6.0)
    np.testing.assert_array_equal(first, second)
    assert len(first) == 121


def test_step_plan_rejects_non_positive_step():
    with pytest.raises(InvalidInput):
        StepPlan(0.0)


def test_fixed_saves_at_requested_times(decay):
    times = [0.0, 0.25, 1.0]
    trajectory = integrate_fixed(decay, np.array([1.0]), (0.0, 1.0), StepPlan(0.1), times)
    np.testing.assert_array_equal(trajectory.times, times)
    np.testing.assert_allclose(trajectory.values()[:, 0], np.exp(-np.array(times)), rtol=5e-6)


def test_fixed_rejects_save_times_outside_span(decay):
    with pytest.raises(InvalidInput):
        integrate_fixed(decay, np.array([1.0]), (0.0, 1.0), StepPlan(0.1), [0.5, 1.5])


def test_fixed_order_of_convergence(decay):
    errors = []
    for h in (0.1, 0.05, 0.025):
        trajectory = integrate_fixed(decay, np.array([1.0]), (0.0, 1.0), StepPlan(h), [1.0])
        errors.append(abs(trajectory.values()[0, 0] - math.exp(-1.0)))

    orders = [math.log2(errors[i] / errors[i + 1]) for i in range(2)]
    for order in orders:
        assert order == pytest.approx(4.0, abs=0.1)


def test_fixed_is_differentiable_in_the_initial_state(oscillator):
    def objective(x0):
        trajectory = integrate_fixed(oscillator, x0, (0.0, 1.0), StepPlan(0.1), [0.5, 1.0])
        return sumsq(trajectory.states)

    x0 = np.array([0.3, -0.7])
    _, gradient = grad(objective, x0)
    np.testing.assert_allclose(gradient, fd_grad(objective, x0), rtol=1e-6)


def test_adaptive_matches_the_exact_solution(oscillator):
    times = np.linspace(0.0, 10.0, 11)
    trajectory = integrate_adaptive(oscillator, np.array([1.0, 0.0]), (0.0, 10.0), 1e-10, 1e-12, times)
    np.testing.assert_allclose(trajectory.values()[:, 0], np.cos(times), atol=1e-8)
    np.testing.assert_allclose(trajectory.values()[:, 1], -np.sin(times), atol=1e-8)


def test_adaptive_lands_on_breakpoints():
    # the input switches from 1 to -1 at t = 1
    field = OdeField(lambda x, t, t_mid: np.array([1.0 if t_mid < 1.0 else -1.0]), 1, breakpoints=[1.0])
    trajectory = integrate_adaptive(field, np.array([0.0]), (0.0, 2.0), 1e-9, 1e-12, [1.0, 2.0])
    np.testing.assert_allclose(trajectory.values()[:, 0], [1.0, 0.0], atol=1e-12)


def test_fixed_lands_on_breakpoints():
    field = OdeField(lambda x, t, t_mid: np.array([1.0 if t_mid < 0.35 else 0.0]), 1, breakpoints=[0.35])
    trajectory = integrate_fixed(field, np.array([0.0]), (0.0, 1.0), StepPlan(0.1), [1.0])
    assert trajectory.values()[0, 0] == pytest.approx(0.35, abs=1e-12)


def test_adaptive_reports_step_budget():
    field = OdeField.from_autonomous(lambda x: -1000.0 * x, 1)
    with pytest.raises(IntegrationError):
        integrate_adaptive(field, np.array([1.0]), (0.0, 100.0), 1e-10, 1e-12, [100.0], max_steps=50)


def test_adaptive_reports_step_underflow():
    # dx/dt = x^2 from x = 1 blows up at t = 1
    blowup = OdeField.from_autonomous(lambda x: x * x, 1)
    with pytest.raises(IntegrationError, match='underflow') as info:
        integrate_adaptive(blowup, np.array([1.0]), (0.0, 2.0), 1e-6, 1e-9, [2.0])
    assert info.value.time == pytest.approx(1.0, abs=1e-6)


def test_fixed_and_adaptive_agree_on_the_spiral():
    times = np.linspace(0.0, 6.0, 61)
    x0 = np.array([2.0, 0.0])
    fixed = integrate_fixed(spiral_truth(), x0, (0.0, 6.0), StepPlan(1e-3), times)
    adaptive = integrate_adaptive(spiral_truth(), x0, (0.0, 6.0), 1e-8, 1e-10, times)
    assert np.max(np.abs(fixed.values() - adaptive.values())) <= 1e-5


@pytest.mark.parametrize('method', ['fixed', 'adaptive'])
def test_repeated_integration_is_bit_identical(method):
    times = np.linspace(0.0, 6.0, 61)
    x0 = np.array([2.0, 0.0])

    def run():
        if method == 'fixed':
            return integrate_fixed(spiral_truth(), x0, (0.0, 6.0), StepPlan(0.05), times).values()
        return integrate_adaptive(spiral_truth(), x0, (0.0, 6.0), 1e-8, 1e-10, times).values()

    first, second = run(), run()
    assert first.tobytes() == second.tobytes()


def test_adaptive_rejects_bad_tolerances(decay):
    with pytest.raises(InvalidInput):
        integrate_adaptive(decay, np.array([1.0]), (0.0, 1.0), 0.0, 1e-9, [1.0])


def test_state_at(decay):
    trajectory = integrate_fixed(decay, np.array([2.0]), (0.0, 1.0), StepPlan(0.5), [0.0, 0.5])
    assert trajectory.state_at(0.0)[0] == 2.0
    with pytest.raises(InvalidInput):
        trajectory.state_at(0.25)


def test_rk4_step_on_growth():
    growth = OdeField.from_autonomous(lambda x: x, 1)
    assert rk4_step(growth, np.array([1.0]), 0.0, 0.1)[0] == pytest.approx(1.10517083, abs=1e-8)


def test_fixed_decay_to_one(decay):
    trajectory = integrate_fixed(decay, np.array([1.0]), (0.0, 1.0), StepPlan(0.01), [1.0])
    assert trajectory.values()[0, 0] == pytest.approx(math.exp(-1.0), abs=1e-10)


def test_time_dependent_field():
    # dx/dt = cos(t) integrates to sin(t)
    field = OdeField.from_time(lambda x, t: np.array([math.cos(t)]), 1)
    trajectory = integrate_fixed(field, np.zeros(1), (0.0, math.pi), StepPlan(0.01), [math.pi / 2, math.pi])
    np.testing.assert_allclose(trajectory.values()[:, 0], [1.0, 0.0], atol=1e-9)
