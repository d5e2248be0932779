from __future__ import annotations

import json
import logging
import os
import uuid
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import CheckpointError, InvalidArchitecture, InvalidInput
from .tape import sqrt, sumsq, tanh, value_of

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SPECTRAL_ITERATIONS = 25

ACTIVATIONS: dict[str, Callable[[Any], Any]] = {
    'tanh': tanh,
    'identity': lambda x: x,
}


class MlpParams:
    """Weights of a fully connected network.

    Each layer is ``activation(W @ x + b)``; the bias is absent when
    ``use_bias`` is false, in which case the network maps zero to zero.
    Weights may be tape variables, which is how the network is
    differentiated as part of a decision vector.

    Attributes
    -----------
    weights: list
        Per-layer ``(out, in)`` matrices.
    biases: Optional[list]
        Per-layer bias vectors, ``None`` when the network is bias-free.
    activations: list[str]
        Activation tag per layer.
    seed: Optional[int]
        The seed the weights were initialised from, if any.
    """

    __slots__ = ('weights', 'biases', 'activations', 'seed')

    def __init__(
        self,
        weights: Sequence[Any],
        activations: Sequence[str],
        *,
        biases: Optional[Sequence[Any]] = None,
        seed: Optional[int] = None,
    ) -> None:
        if not weights:
            raise InvalidArchitecture('a network needs at least one layer')
        if len(activations) != len(weights):
            raise InvalidArchitecture('one activation per layer is required')

        for tag in activations:
            if tag not in ACTIVATIONS:
                raise InvalidArchitecture(f'unknown activation {tag!r}')

        shapes = [value_of(w).shape for w in weights]
        for shape in shapes:
            if len(shape) != 2 or 0 in shape:
                raise InvalidArchitecture(f'layer weights must be non-empty matrices, got shape {shape}')

        for previous, current in zip(shapes, shapes[1:]):
            if current[1] != previous[0]:
                raise InvalidArchitecture(f'layer dimensions do not chain: {previous} then {current}')

        if biases is not None:
            if len(biases) != len(weights):
                raise InvalidArchitecture('one bias vector per layer is required')
            for b, shape in zip(biases, shapes):
                if value_of(b).shape != (shape[0],):
                    raise InvalidArchitecture(f'bias shape {value_of(b).shape} does not match layer {shape}')

        self.weights: list[Any] = list(weights)
        self.biases: Optional[list[Any]] = None if biases is None else list(biases)
        self.activations: list[str] = list(activations)
        self.seed: Optional[int] = seed

    def __repr__(self) -> str:
        return f'<MlpParams layers={self.layer_sizes} use_bias={self.use_bias}>'

    @property
    def use_bias(self) -> bool:
        return self.biases is not None

    @property
    def layer_sizes(self) -> list[int]:
        shapes = [value_of(w).shape for w in self.weights]
        return [shapes[0][1], *(s[0] for s in shapes)]

    @property
    def n_params(self) -> int:
        count = sum(value_of(w).size for w in self.weights)
        if self.biases is not None:
            count += sum(value_of(b).size for b in self.biases)
        return count

    def flatten(self) -> np.ndarray:
        """Packs weights (then biases) into one vector, layer by layer, row-major."""
        parts = [value_of(w).ravel() for w in self.weights]
        if self.biases is not None:
            parts.extend(value_of(b).ravel() for b in self.biases)
        return np.concatenate(parts)

    def unflatten(self, vector: Any) -> MlpParams:
        """The inverse of :meth:`flatten`; ``vector`` may be a tape variable."""
        if len(vector) != self.n_params:
            raise InvalidInput(f'expected {self.n_params} parameters, got {len(vector)}')

        offset = 0
        weights = []
        for w in self.weights:
            shape = value_of(w).shape
            size = shape[0] * shape[1]
            weights.append(vector[offset : offset + size].reshape(shape))
            offset += size

        biases = None
        if self.biases is not None:
            biases = []
            for b in self.biases:
                size = value_of(b).size
                biases.append(vector[offset : offset + size])
                offset += size

        return MlpParams(weights, self.activations, biases=biases, seed=self.seed)

    def scaled(self, factor: float) -> MlpParams:
        biases = None if self.biases is None else [factor * value_of(b) for b in self.biases]
        return MlpParams([factor * value_of(w) for w in self.weights], self.activations, biases=biases, seed=self.seed)


@dataclass(frozen=True)
class RegSpec:
    kind: str = 'spectral_sum'
    weight: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ('spectral_sum', 'l2', 'none'):
            raise InvalidInput(f'unknown regularizer kind {self.kind!r}')
        if not self.weight >= 0:
            raise InvalidInput(f'regularization weight must be nonnegative, got {self.weight!r}')


def mlp_new(layer_sizes: Sequence[int], use_bias: bool = False, seed: int = 0) -> MlpParams:
    """Glorot-uniform initialisation: ``W ~ U[-L, L]`` with ``L = sqrt(6 / (fan_in + fan_out))``.

    tanh follows every layer except the last, which is linear. Biases start at zero.
    """
    if len(layer_sizes) < 2:
        raise InvalidArchitecture('at least an input and an output size are required')
    if any(int(size) <= 0 for size in layer_sizes):
        raise InvalidArchitecture(f'layer sizes must be positive, got {list(layer_sizes)}')

    rng = np.random.default_rng(seed)
    weights = []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(int(fan_out), int(fan_in))))

    activations = ['tanh'] * (len(weights) - 1) + ['identity']
    biases = [np.zeros(int(size)) for size in layer_sizes[1:]] if use_bias else None
    return MlpParams(weights, activations, biases=biases, seed=seed)


def mlp_forward(params: MlpParams, x: Any) -> Any:
    size = value_of(x).shape
    if size != (params.layer_sizes[0],):
        raise InvalidInput(f'network expects an input of length {params.layer_sizes[0]}, got shape {size}')

    for index, (w, tag) in enumerate(zip(params.weights, params.activations)):
        x = w @ x
        if params.biases is not None:
            x = x + params.biases[index]
        x = ACTIVATIONS[tag](x)
    return x


def spectral_norm(w: Any, iters: int = SPECTRAL_ITERATIONS) -> Any:
    """Largest singular value by power iteration on ``W^T W``.

    The start vector is the normalised all-ones vector, so the estimate is
    deterministic and, on a tape, differentiable. If that vector lies in the
    null space of ``W`` the iteration restarts from the unit vector of the
    column with the largest norm.
    """
    matrix = value_of(w)
    if matrix.size == 0:
        raise InvalidInput('spectral norm of an empty matrix')
    if not np.any(matrix):
        return 0.0

    n = matrix.shape[1]
    v: Any = np.full(n, 1.0 / np.sqrt(n))
    for _ in range(iters):
        u = w.T @ (w @ v)
        norm = sqrt(sumsq(u))
        if not value_of(norm) > 0.0:
            v = np.eye(n)[int(np.argmax(np.sum(matrix * matrix, axis=0)))]
            continue
        v = u / norm
    return sqrt(sumsq(w @ v))


def regularizer(params: MlpParams, spec: RegSpec) -> Any:
    """The unscaled complexity term; callers multiply by ``spec.weight``."""
    total: Any = 0.0
    if spec.kind == 'spectral_sum':
        for w in params.weights:
            total = total + spectral_norm(w)
    elif spec.kind == 'l2':
        for w in params.weights:
            total = total + sumsq(w)
    return total


def save_checkpoint(path: str, params: MlpParams, *, extras: Optional[dict[str, Any]] = None) -> None:
    payload = {
        'format_version': CHECKPOINT_VERSION,
        'layer_sizes': params.layer_sizes,
        'use_bias': params.use_bias,
        'activations': params.activations,
        'seed': params.seed,
        'weights': [value_of(w).ravel().tolist() for w in params.weights],
        'biases': None if params.biases is None else [value_of(b).tolist() for b in params.biases],
        'extras': extras or {},
    }

    temp = f'{path}.{uuid.uuid4()}.tmp'
    with open(temp, 'w', encoding='utf-8') as fp:
        json.dump(payload, fp, indent=2)

    # atomically move the file
    os.replace(temp, path)
    log.info('Wrote checkpoint %s (%d parameters)', path, params.n_params)


def load_checkpoint(path: str) -> tuple[MlpParams, dict[str, Any]]:
    try:
        with open(path, 'r', encoding='utf-8') as fp:
            payload = json.load(fp)
    except FileNotFoundError:
        raise CheckpointError(f'checkpoint {path} does not exist') from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f'checkpoint {path} is not valid JSON: {e}') from None

    version = payload.get('format_version')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'unsupported checkpoint format version {version!r}')

    try:
        sizes = payload['layer_sizes']
        weights = [
            np.asarray(flat, dtype=float).reshape(fan_out, fan_in)
            for flat, fan_in, fan_out in zip(payload['weights'], sizes, sizes[1:])
        ]
        biases = payload.get('biases')
        if biases is not None:
            biases = [np.asarray(b, dtype=float) for b in biases]
        params = MlpParams(weights, payload['activations'], biases=biases, seed=payload.get('seed'))
    except (KeyError, ValueError, InvalidArchitecture) as e:
        raise CheckpointError(f'checkpoint {path} is malformed: {e}') from None

    return params, payload.get('extras', {})
