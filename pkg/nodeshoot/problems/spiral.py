"""The cubic spiral: ``dx/dt = A x^3`` with a weakly damped rotation ``A``."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from ..errors import InvalidArchitecture, InvalidInput
from ..network import MlpParams, mlp_forward, mlp_new
from ..ode import OdeField, integrate_adaptive
from ..shooting import TimeSeries
from ..utils.config import ExperimentConfig
from ..utils.export import read_series
from .base import Problem, Split, reg_from_config, register

log = logging.getLogger(__name__)

SPIRAL_A = np.array([[-0.1, 2.0], [-2.0, -0.1]])


@dataclass(frozen=True)
class SpiralSpec:
    x0: tuple[float, float] = (2.0, 0.0)
    span: tuple[float, float] = (0.0, 6.0)
    interval: float = 0.1
    noise: float = 0.2
    seed: int = 0
    rtol: float = 1e-8
    atol: float = 1e-10

    def __post_init__(self) -> None:
        if not self.interval > 0:
            raise InvalidInput(f'sample interval must be positive, got {self.interval!r}')
        if not self.noise >= 0:
            raise InvalidInput(f'noise standard deviation must be nonnegative, got {self.noise!r}')
        if not self.span[1] > self.span[0]:
            raise InvalidInput(f'span must be increasing, got {self.span!r}')

    @property
    def times(self) -> np.ndarray:
        t0, tf = self.span
        count = int(round((tf - t0) / self.interval)) + 1
        return np.round(t0 + self.interval * np.arange(count), 12)

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> SpiralSpec:
        return cls(
            x0=tuple(config.get('spiral.x0')),
            span=tuple(config.get('spiral.span')),
            interval=float(config.get('spiral.interval')),
            noise=float(config.get('spiral.noise')),
            seed=int(config.get('seed')),
            rtol=float(config.get('spiral.rtol')),
            atol=float(config.get('spiral.atol')),
        )


def spiral_rhs(x: Any, a: np.ndarray = SPIRAL_A) -> Any:
    if np.shape(x) != (2,):
        raise InvalidInput(f'the spiral state has two components, got shape {np.shape(x)}')
    return a @ (x**3)


def spiral_truth() -> OdeField:
    return OdeField.from_autonomous(lambda x: spiral_rhs(x), 2)


def gen_spiral(spec: SpiralSpec) -> TimeSeries:
    """Samples the true spiral at ``spec.interval`` and adds seeded Gaussian noise."""
    times = spec.times
    trajectory = integrate_adaptive(spiral_truth(), np.asarray(spec.x0, dtype=float), spec.span, spec.rtol, spec.atol, times)
    values = trajectory.values().copy()
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        values += rng.normal(0.0, spec.noise, size=values.shape)

    log.debug('generated %d spiral samples (noise %s, seed %d)', len(times), spec.noise, spec.seed)
    return TimeSeries(times, values)


def spiral_field(theta: MlpParams) -> OdeField:
    """``dx/dt = NN(x^3)`` with a bias-free ``2 -> ... -> 2`` network."""
    sizes = theta.layer_sizes
    if sizes[0] != 2 or sizes[-1] != 2:
        raise InvalidArchitecture(f'the spiral field needs a 2 -> ... -> 2 network, got {sizes}')
    if theta.use_bias:
        raise InvalidArchitecture('the spiral field needs a bias-free network')

    def func(x: Any) -> Any:
        return mlp_forward(theta, x**3)

    return OdeField.from_autonomous(func, 2)


@register('spiral')
def build(config: ExperimentConfig) -> Problem:
    spec = SpiralSpec.from_config(config)
    path = config.get('data.path')
    data = read_series(path) if path is not None else gen_spiral(spec)
    if data.n_obs != 2:
        raise InvalidInput(f'spiral data needs two state columns, got {data.n_obs}')

    hidden = list(config.get('network.hidden'))
    template = mlp_new([2, *hidden, 2], use_bias=bool(config.get('network.use_bias')), seed=int(config.get('seed')))
    pinned = np.asarray(spec.x0, dtype=float) if config.get('shooting.pin_initial') else None
    extras: dict[str, object] = {'noise': spec.noise}

    # the misfit of the clean trajectory is the floor a perfect fit can reach
    clean = gen_spiral(dataclasses.replace(spec, noise=0.0))
    if len(clean) == len(data) and np.allclose(clean.times, data.times):
        extras['noise_sse'] = float(np.sum((data.values - clean.values) ** 2))

    return Problem(
        name='spiral',
        data=data,
        template=template,
        field_builder=spiral_field,
        reg=reg_from_config(config),
        n_x=2,
        observed=(0, 1),
        pinned_initial=pinned,
        splits=[Split('train', data, spiral_field)],
        extras=extras,
    )
