from __future__ import annotations

from typing import Any

from ..errors import InvalidArchitecture
from ..network import MlpParams, mlp_forward, mlp_new
from ..ode import OdeField
from ..utils.config import ExperimentConfig
from ..utils.export import read_series
from .base import Problem, Split, reg_from_config, register


def autonomous_field(theta: MlpParams) -> OdeField:
    """``dx/dt = NN(x)`` for a network whose input and output sizes agree."""
    sizes = theta.layer_sizes
    if sizes[0] != sizes[-1]:
        raise InvalidArchitecture(f'an autonomous field needs matching input and output sizes, got {sizes}')

    def func(x: Any) -> Any:
        return mlp_forward(theta, x)

    return OdeField.from_autonomous(func, sizes[0])


@register('custom')
def build(config: ExperimentConfig) -> Problem:
    data = read_series(config.get('data.path'))
    n_x = data.n_obs
    hidden = list(config.get('network.hidden'))
    template = mlp_new([n_x, *hidden, n_x], use_bias=bool(config.get('network.use_bias')), seed=int(config.get('seed')))
    return Problem(
        name='custom',
        data=data,
        template=template,
        field_builder=autonomous_field,
        reg=reg_from_config(config),
        n_x=n_x,
        observed=tuple(range(n_x)),
        splits=[Split('train', data, autonomous_field)],
    )
