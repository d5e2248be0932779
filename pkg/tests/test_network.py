from __future__ import annotations

import json

import numpy as np
import pytest

from nodeshoot.errors import CheckpointError, InvalidArchitecture, InvalidInput
from nodeshoot.network import (
    MlpParams,
    RegSpec,
    load_checkpoint,
    mlp_forward,
    mlp_new,
    regularizer,
    save_checkpoint,
    spectral_norm,
)
from nodeshoot.tape import fd_grad, grad, value_of


def test_glorot_bounds_and_shapes():
    params = mlp_new([2, 50, 2], seed=3)
    assert params.layer_sizes == [2, 50, 2]
    assert params.n_params == 200
    assert not params.use_bias

    limit = np.sqrt(6.0 / 52.0)
    for w in params.weights:
        assert w.shape in ((50, 2), (2, 50))
        assert np.all(np.abs(w) <= limit)


def test_same_seed_same_weights():
    first = mlp_new([5, 8, 1], seed=7).flatten()
    second = mlp_new([5, 8, 1], seed=7).flatten()
    third = mlp_new([5, 8, 1], seed=8).flatten()
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first, third)


def test_bias_free_network_maps_zero_to_zero():
    params = mlp_new([2, 16, 16, 2], seed=1)
    np.testing.assert_array_equal(mlp_forward(params, np.zeros(2)), np.zeros(2))


def test_forward_with_bias():
    w1 = np.array([[1.0, 0.0], [0.0, 2.0]])
    w2 = np.array([[1.0, 1.0]])
    params = MlpParams([w1, w2], ['tanh', 'identity'], biases=[np.array([0.5, 0.0]), np.array([1.0])])
    out = mlp_forward(params, np.array([0.0, 0.25]))
    assert out[0] == pytest.approx(np.tanh(0.5) + np.tanh(0.5) + 1.0)


def test_parameter_counts():
    assert mlp_new([2, 16, 2], seed=0).n_params == 64
    assert mlp_new([5, 64, 1]).n_params == 384


def test_single_linear_layer():
    params = MlpParams([np.array([[2.0]])], ['identity'])
    np.testing.assert_array_equal(mlp_forward(params, np.array([3.0])), [6.0])


def test_tanh_saturates():
    params = MlpParams([np.array([[1000.0]])], ['tanh'])
    assert mlp_forward(params, np.array([1.0]))[0] == pytest.approx(1.0, abs=1e-9)


def test_forward_rejects_wrong_input_size():
    with pytest.raises(InvalidInput):
        mlp_forward(mlp_new([2, 4, 2]), np.zeros(3))


@pytest.mark.parametrize(
    'sizes',
    [[2], [2, 0, 2], [-1, 2]],
)
def test_invalid_layer_sizes(sizes):
    with pytest.raises(InvalidArchitecture):
        mlp_new(sizes)


def test_layers_must_chain():
    with pytest.raises(InvalidArchitecture):
        MlpParams([np.ones((3, 2)), np.ones((1, 4))], ['tanh', 'identity'])


def test_unknown_activation():
    with pytest.raises(InvalidArchitecture):
        MlpParams([np.ones((1, 2))], ['relu'])


def test_flatten_unflatten_round_trip():
    params = mlp_new([3, 4, 2], use_bias=True, seed=2)
    vector = params.flatten()
    assert vector.shape == (params.n_params,)
    restored = params.unflatten(vector)
    for a, b in zip(params.weights, restored.weights):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(params.biases, restored.biases):
        np.testing.assert_array_equal(a, b)


def test_unflatten_rejects_wrong_length():
    params = mlp_new([2, 3, 2])
    with pytest.raises(InvalidInput):
        params.unflatten(np.zeros(params.n_params + 1))


def test_spectral_norm_of_diagonal():
    assert float(spectral_norm(np.diag([3.0, 1.0]))) == pytest.approx(3.0, rel=1e-9)


def test_spectral_norm_matches_svd(rng):
    w = rng.normal(size=(6, 4))
    expected = np.linalg.svd(w, compute_uv=False)[0]
    assert float(spectral_norm(w, iters=100)) == pytest.approx(expected, rel=1e-6)


def test_spectral_norm_of_zero_matrix():
    assert spectral_norm(np.zeros((3, 3))) == 0.0


@pytest.mark.parametrize(
    'w, expected',
    [
        ([[1.0, -1.0]], np.sqrt(2.0)),
        ([[1.0, -1.0], [2.0, -2.0]], np.sqrt(10.0)),
        ([[1.0, 0.0, -1.0], [0.0, 0.0, 0.0]], np.sqrt(2.0)),
    ],
)
def test_spectral_norm_with_ones_in_the_null_space(w, expected):
    w = np.array(w)
    assert float(spectral_norm(w)) == pytest.approx(expected, rel=1e-9)

    def objective(z):
        return spectral_norm(z.reshape(w.shape))

    _, gradient = grad(objective, w.ravel())
    assert np.all(np.isfinite(gradient))
    u, _, vt = np.linalg.svd(w)
    np.testing.assert_allclose(np.abs(gradient), np.abs(np.outer(u[:, 0], vt[0]).ravel()), atol=1e-6)


def test_spectral_norm_is_differentiable():
    w0 = np.array([[3.0, 0.2, 0.1], [0.1, 1.0, 0.3], [0.0, 0.2, 0.5]])

    def objective(z):
        return spectral_norm(z.reshape(3, 3), iters=50)

    _, gradient = grad(objective, w0.ravel())
    u, _, vt = np.linalg.svd(w0)
    # the derivative of the top singular value is the outer product of its singular vectors
    np.testing.assert_allclose(gradient, np.outer(u[:, 0], vt[0]).ravel(), atol=1e-5)
    np.testing.assert_allclose(gradient, fd_grad(objective, w0.ravel()), atol=1e-5)


def test_regularizer_kinds():
    params = MlpParams([np.diag([2.0, 1.0]), np.array([[0.0, 4.0]])], ['tanh', 'identity'])
    assert float(regularizer(params, RegSpec('spectral_sum', 1.0))) == pytest.approx(6.0, rel=1e-9)
    assert float(regularizer(params, RegSpec('l2', 1.0))) == pytest.approx(21.0)
    assert float(regularizer(params, RegSpec('none'))) == 0.0


@pytest.mark.parametrize(
    'kind, weight',
    [('frobenius', 1.0), ('l2', -1.0), ('l2', float('nan'))],
)
def test_invalid_reg_spec(kind, weight):
    with pytest.raises(InvalidInput):
        RegSpec(kind, weight)


def test_checkpoint_round_trip(tmp_path):
    params = mlp_new([5, 64, 1], seed=11)
    path = str(tmp_path / 'checkpoint.json')
    save_checkpoint(path, params, extras={'step': 1.0})

    restored, extras = load_checkpoint(path)
    assert extras == {'step': 1.0}
    assert restored.layer_sizes == [5, 64, 1]
    assert restored.seed == 11
    np.testing.assert_array_equal(restored.flatten(), params.flatten())
    assert list(tmp_path.iterdir()) == [tmp_path / 'checkpoint.json']


def test_checkpoint_of_tape_weights(tmp_path):
    params = mlp_new([2, 3, 2], seed=0)
    path = str(tmp_path / 'c.json')

    def objective(z):
        save_checkpoint(path, params.unflatten(z))
        return 0.0

    grad(objective, params.flatten())
    restored, _ = load_checkpoint(path)
    np.testing.assert_array_equal(restored.flatten(), value_of(params.flatten()))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / 'absent.json'))


def test_malformed_checkpoint(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text('{not json', encoding='utf-8')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))

    path.write_text(json.dumps({'format_version': 99}), encoding='utf-8')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))

    path.write_text(json.dumps({'format_version': 1, 'layer_sizes': [2, 2]}), encoding='utf-8')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
