from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import ConfigError
from ..network import MlpParams, RegSpec
from ..shooting import FieldBuilder, TimeSeries
from ..utils.config import ExperimentConfig

log = logging.getLogger(__name__)


@dataclass
class Split:
    """A series the trained model is scored on.

    The model is integrated as one initial value problem from ``t_start`` and
    read off at the series' times. ``initial`` says where the start state
    comes from: ``'fitted'`` uses the first fitted shooting state and
    ``'observed'`` the first observation of the series.
    """

    name: str
    series: TimeSeries
    field_builder: FieldBuilder
    initial: str = 'fitted'
    t_start: Optional[float] = None

    @property
    def start(self) -> float:
        return float(self.series.times[0]) if self.t_start is None else float(self.t_start)

    def simulation_times(self) -> np.ndarray:
        times = self.series.times
        if self.start < times[0]:
            return np.concatenate([[self.start], times])
        return times


@dataclass
class Problem:
    """Everything a run needs to know about an experiment.

    Attributes
    -----------
    name: str
        The registry tag.
    data: TimeSeries
        The series the shooting objective is fitted to.
    template: MlpParams
        The seeded initial network; its shape fixes the layout of the decision vector.
    field_builder: FieldBuilder
        Maps network parameters to the vector field being fitted.
    splits: list[Split]
        The series reported after training, in reporting order.
    """

    name: str
    data: TimeSeries
    template: MlpParams
    field_builder: FieldBuilder
    reg: RegSpec
    n_x: int
    observed: tuple[int, ...]
    pinned_initial: Optional[np.ndarray] = None
    splits: list[Split] = field(default_factory=list)
    extras: dict[str, object] = field(default_factory=dict)

    def split(self, name: str) -> Split:
        for split in self.splits:
            if split.name == name:
                return split
        raise KeyError(name)


ProblemBuilder = Callable[[ExperimentConfig], Problem]
PROBLEMS: dict[str, ProblemBuilder] = {}


def register(name: str) -> Callable[[ProblemBuilder], ProblemBuilder]:
    def decorator(func: ProblemBuilder) -> ProblemBuilder:
        PROBLEMS[name] = func
        return func

    return decorator


def build_problem(config: ExperimentConfig) -> Problem:
    try:
        builder = PROBLEMS[config.problem]
    except KeyError:
        raise ConfigError(f'no builder registered for problem {config.problem!r}') from None

    problem = builder(config)
    log.info(
        'Built problem %s: %d observations, network %s, %d parameters',
        problem.name,
        len(problem.data),
        problem.template.layer_sizes,
        problem.template.n_params,
    )
    return problem


def reg_from_config(config: ExperimentConfig) -> RegSpec:
    return RegSpec(config.get('regularization.kind'), float(config.get('regularization.weight')))
