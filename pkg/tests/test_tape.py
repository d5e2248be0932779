from __future__ import annotations

import numpy as np
import pytest

from nodeshoot.errors import GradientError, InvalidInput
from nodeshoot.tape import (
    Tape,
    absolute,
    concat,
    dot,
    fd_grad,
    grad,
    maxabs,
    sqrt,
    stack,
    sumsq,
    tanh,
    total,
    value_of,
)


def test_sum_of_squares_gradient():
    value, gradient = grad(lambda z: sumsq(z), [1.0, -2.0, 3.0])
    assert value == pytest.approx(14.0)
    np.testing.assert_allclose(gradient, [2.0, -4.0, 6.0])


def test_product_and_quotient():
    def objective(z):
        return total(z[0] * z[1] / (z[2] + 1.0))

    z = np.array([2.0, 3.0, 1.0])
    value, gradient = grad(objective, z)
    assert value == pytest.approx(3.0)
    np.testing.assert_allclose(gradient, fd_grad(objective, z), rtol=1e-7, atol=1e-9)


def test_matmul_tanh_chain_matches_finite_differences(rng):
    a = rng.normal(size=(4, 3))

    def objective(z):
        w = z[:12].reshape(4, 3)
        x = z[12:]
        return sumsq(tanh(w @ x) - a @ x)

    z = rng.normal(size=15)
    _, gradient = grad(objective, z)
    np.testing.assert_allclose(gradient, fd_grad(objective, z), rtol=1e-6, atol=1e-8)


def test_plain_arrays_evaluate_without_a_tape():
    x = np.array([1.0, -4.0])
    assert float(sumsq(x)) == 17.0
    assert float(maxabs(x)) == 4.0
    assert float(dot(x, x)) == 17.0
    np.testing.assert_allclose(absolute(x), [1.0, 4.0])
    np.testing.assert_allclose(concat([x, 3.0]), [1.0, -4.0, 3.0])
    np.testing.assert_allclose(stack([x, x]).shape, (2, 2))


def test_sqrt_is_clamped():
    assert float(sqrt(np.array(-1.0))) == 0.0
    value, gradient = grad(lambda z: total(sqrt(z)), [-1.0, 0.0, 4.0])
    assert value == pytest.approx(2.0)
    np.testing.assert_allclose(gradient, [0.0, 0.0, 0.25])


def test_sqrt_with_a_floor():
    assert float(sqrt(np.array(0.0), floor=1e-12)) == pytest.approx(1e-6)
    value, gradient = grad(lambda z: total(sqrt(z, floor=1e-12)), [-1.0, 1e-13, 4.0])
    assert value == pytest.approx(2.0 + 2e-6)
    np.testing.assert_allclose(gradient, [0.0, 0.0, 0.25])


def test_maxabs_gradient_selects_the_largest_entry():
    _, gradient = grad(lambda z: maxabs(z), [1.0, -3.0, 2.0])
    np.testing.assert_allclose(gradient, [0.0, -1.0, 0.0])


def test_maxabs_of_empty_is_zero():
    assert float(maxabs(np.zeros(0))) == 0.0


def test_indexing_accumulates_repeated_reads():
    _, gradient = grad(lambda z: total(z[[0, 0, 1]]), [5.0, 7.0])
    np.testing.assert_allclose(gradient, [2.0, 1.0])


def test_concat_and_stack_route_gradients(rng):
    def objective(z):
        rows = stack([z[:2], z[2:] * 2.0])
        return sumsq(concat([rows[0], rows[1], z[0]]))

    z = rng.normal(size=4)
    _, gradient = grad(objective, z)
    np.testing.assert_allclose(gradient, fd_grad(objective, z), rtol=1e-6, atol=1e-8)


def test_constant_objective_has_zero_gradient():
    value, gradient = grad(lambda z: 3.0, [1.0, 2.0])
    assert value == 3.0
    np.testing.assert_array_equal(gradient, [0.0, 0.0])


def test_non_scalar_objective_is_rejected():
    with pytest.raises(InvalidInput):
        grad(lambda z: z * 2.0, [1.0, 2.0])


def test_non_finite_adjoint_raises():
    # the derivative of x**0.5 at zero is infinite
    with pytest.raises(GradientError) as excinfo:
        grad(lambda z: total(z**0.5), [0.0, 1.0])
    assert excinfo.value.op


def test_replay_recomputes_the_output():
    tape = Tape()
    x = tape.leaf([0.5, -1.5])
    out = sumsq(tanh(x) * 3.0)
    values = tape.replay()
    assert len(values) == len(tape)
    np.testing.assert_allclose(values[out.index], value_of(out))


def test_variables_from_different_tapes_do_not_mix():
    a = Tape().leaf([1.0])
    b = Tape().leaf([1.0])
    with pytest.raises(InvalidInput):
        a + b


def test_numpy_defers_to_recorded_operators():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    result = np.array([3.0, 4.0]) * x
    assert result.tape is tape
    np.testing.assert_allclose(result.value, [3.0, 8.0])
