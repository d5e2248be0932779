"""The cascaded-tanks benchmark and its input-driven feature model.

The water level ``y`` is modelled as a scalar ODE whose right-hand side is a
network of five features: the current input, the level, its square root, the
delayed input and the input integrated over a trailing window. The input is
held constant over each sampling cell.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Optional

import numpy as np
import pandas as pd
import scipy.io

from ..errors import DatasetFormatError, InvalidArchitecture, InvalidInput
from ..network import MlpParams, mlp_forward, mlp_new
from ..ode import OdeField, integrate_adaptive
from ..shooting import TimeSeries
from ..tape import concat, sqrt
from ..utils.config import ExperimentConfig
from .base import Problem, Split, reg_from_config, register

log = logging.getLogger(__name__)

TANKS_SAMPLES = 1024
TANKS_PERIOD = 4.0
TANKS_COLUMNS = ('uEst', 'yEst', 'uVal', 'yVal')
N_FEATURES = 5
LEVEL_FLOOR = 1e-12


class ControlSignal:
    """A sampled input held constant over each cell ``[k*period, (k+1)*period)``.

    Before ``t = 0`` the signal keeps its first sample and past the last cell
    it keeps its last one. ``prefix[k]`` is the integral over ``[0, k*period]``.

    Attributes
    -----------
    samples: numpy.ndarray
        The cell values ``u_k``.
    period: float
        Cell width in seconds.
    prefix: numpy.ndarray
        Running integral at the cell edges, ``len(samples) + 1`` entries.
    """

    __slots__ = ('samples', 'period', 'prefix')

    def __init__(self, samples: Any, period: float = TANKS_PERIOD) -> None:
        samples = np.asarray(samples, dtype=float).ravel()
        if samples.size == 0:
            raise InvalidInput('a control signal needs at least one sample')
        if not np.all(np.isfinite(samples)):
            raise InvalidInput('control signal samples must be finite')
        if not period > 0:
            raise InvalidInput(f'sampling period must be positive, got {period!r}')

        self.samples: np.ndarray = samples
        self.period: float = float(period)
        self.prefix: np.ndarray = np.concatenate([[0.0], np.cumsum(samples) * self.period])

    def __len__(self) -> int:
        return len(self.samples)

    def __repr__(self) -> str:
        return f'<ControlSignal samples={len(self.samples)} period={self.period}>'

    @property
    def times(self) -> np.ndarray:
        return self.period * np.arange(len(self.samples))

    def _cell(self, t: float) -> int:
        return min(int(math.floor(t / self.period)), len(self.samples) - 1)

    def value(self, t: float) -> float:
        if t < 0:
            return float(self.samples[0])
        return float(self.samples[self._cell(t)])

    def running(self, t: float) -> float:
        """The exact integral from 0 to ``t``; negative for ``t < 0``."""
        if t < 0:
            return float(self.samples[0]) * t
        k = self._cell(t)
        return float(self.prefix[k] + self.samples[k] * (t - k * self.period))

    def integral(self, t: float, window: float) -> float:
        if window < 0:
            raise InvalidInput(f'integration window must be nonnegative, got {window!r}')
        if window == 0:
            return 0.0
        return self.running(t) - self.running(t - window)

    def breakpoints(self, span: Optional[tuple[float, float]] = None, delays: Iterable[float] = ()) -> tuple[float, ...]:
        """Times where the signal, or one of its copies shifted later by ``delays``, jumps."""
        jumps = np.flatnonzero(np.diff(self.samples) != 0) + 1
        edges = jumps * self.period
        points = set(edges.tolist())
        for delay in delays:
            if delay:
                points.update((edges + delay).tolist())
        if span is not None:
            points = {p for p in points if span[0] < p < span[1]}
        return tuple(sorted(points))


def signal_value(sig: ControlSignal, t: float) -> float:
    return sig.value(t)


def signal_integral(sig: ControlSignal, t: float, window: float) -> float:
    """The integral of ``sig`` over ``[t - window, t]``."""
    return sig.integral(t, window)


@dataclass(frozen=True)
class TanksSpec:
    tau_d: float = 79.0
    tau_i: float = 164.0
    l2_weight: float = 5.96e-2
    split: float = 2048.0

    def __post_init__(self) -> None:
        if not (self.tau_d >= 0 and self.tau_i >= 0):
            raise InvalidInput(f'delay and integral window must be nonnegative, got {self.tau_d!r} and {self.tau_i!r}')

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> TanksSpec:
        return cls(
            tau_d=float(config.get('tanks.tau_d')),
            tau_i=float(config.get('tanks.tau_i')),
            l2_weight=float(config.get('regularization.weight')),
            split=float(config.get('tanks.split')),
        )


def tank_features(x: Any, t: float, t_mid: float, sig: ControlSignal, spec: TanksSpec) -> Any:
    u = sig.value(t_mid)
    delayed = sig.value(t_mid - spec.tau_d)
    window = sig.integral(t, spec.tau_i)
    return concat([np.array([u]), x, sqrt(x, floor=LEVEL_FLOOR), np.array([delayed]), np.array([window])])


def tanks_field(theta: MlpParams, sig: ControlSignal, spec: TanksSpec) -> OdeField:
    """``dy/dt = NN(u(t), y, sqrt(y), u(t - tau_d), integral of u over [t - tau_i, t])``."""
    sizes = theta.layer_sizes
    if sizes[0] != N_FEATURES or sizes[-1] != 1:
        raise InvalidArchitecture(f'the tanks field needs a {N_FEATURES} -> ... -> 1 network, got {sizes}')
    if theta.use_bias:
        raise InvalidArchitecture('the tanks field needs a bias-free network')

    def func(x: Any, t: float, t_mid: float) -> Any:
        return mlp_forward(theta, tank_features(x, t, t_mid, sig, spec))

    return OdeField(func, 1, breakpoints=sig.breakpoints(delays=(spec.tau_d, spec.tau_i)))


@dataclass
class TanksSeries:
    series: TimeSeries
    signal: ControlSignal

    def split(self, boundary: float) -> tuple[TanksSeries, TanksSeries]:
        """Samples before ``boundary`` and from ``boundary`` on; both keep the whole input."""
        before = self.series.window(float(self.series.times[0]), boundary)
        after = self.series.window(boundary, math.inf)
        if len(before) == 0 or len(after) == 0:
            raise InvalidInput(f'split at {boundary} leaves an empty half')
        return TanksSeries(before, self.signal), TanksSeries(after, self.signal)


@dataclass
class TanksDataset:
    estimation: TanksSeries
    test: TanksSeries

    def __iter__(self) -> Iterator[TanksSeries]:
        yield self.estimation
        yield self.test


def _pair(u: np.ndarray, y: np.ndarray, period: float) -> TanksSeries:
    times = period * np.arange(len(y))
    return TanksSeries(TimeSeries(times, y), ControlSignal(u, period))


def _read_columns(path: str) -> dict[str, np.ndarray]:
    if os.path.splitext(path)[1].lower() == '.mat':
        try:
            contents = scipy.io.loadmat(path)
        except FileNotFoundError:
            raise DatasetFormatError(f'dataset {path} does not exist') from None
        except (ValueError, TypeError) as e:
            raise DatasetFormatError(f'dataset {path} is not a readable .mat file: {e}') from None

        missing = [key for key in TANKS_COLUMNS if key not in contents]
        if missing:
            raise DatasetFormatError(f'dataset {path} is missing {", ".join(missing)}')
        return {key: np.asarray(contents[key], dtype=float).ravel() for key in TANKS_COLUMNS}

    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise DatasetFormatError(f'dataset {path} does not exist') from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DatasetFormatError(f'dataset {path} could not be parsed: {e}') from None

    missing = [key for key in TANKS_COLUMNS if key not in frame.columns]
    if missing:
        raise DatasetFormatError(f'dataset {path} is missing the column(s) {", ".join(missing)}')

    try:
        return {key: frame[key].to_numpy(dtype=float) for key in TANKS_COLUMNS}
    except ValueError as e:
        raise DatasetFormatError(f'dataset {path} has non-numeric entries: {e}') from None


def load_tanks(path: str, period: float = TANKS_PERIOD) -> TanksDataset:
    """Reads the benchmark's estimation and validation records.

    Accepts a CSV with the columns ``uEst, yEst, uVal, yVal`` (any other
    column, such as a time stamp, is ignored and times are rebuilt from the
    sampling period) or the benchmark's ``.mat`` file with the same keys.
    """
    columns = _read_columns(path)
    for key, values in columns.items():
        if len(values) != TANKS_SAMPLES:
            raise DatasetFormatError(f'dataset {path}: column {key} has {len(values)} rows, expected {TANKS_SAMPLES}')
        if not np.all(np.isfinite(values)):
            raise DatasetFormatError(f'dataset {path}: column {key} contains non-finite values')

    log.info('Loaded cascaded tanks data from %s', path)
    return TanksDataset(
        estimation=_pair(columns['uEst'], columns['yEst'], period),
        test=_pair(columns['uVal'], columns['yVal'], period),
    )


# two-tank surrogate: Torricelli outflow, fast upper tank, level of the lower tank measured
_SURROGATE_INFLOW = 0.04
_SURROGATE_UPPER = 0.3
_SURROGATE_LOWER = 0.08


def _surrogate_record(rng: np.random.Generator, samples: int, period: float, hold: int, noise: float) -> TanksSeries:
    levels = rng.uniform(2.0, 6.0, size=math.ceil(samples / hold))
    signal = ControlSignal(np.repeat(levels, hold)[:samples], period)

    def func(x: Any, t: float, t_mid: float) -> np.ndarray:
        upper, lower = np.sqrt(np.maximum(x, 0.0))
        inflow = _SURROGATE_INFLOW * signal.value(t_mid)
        return np.array([inflow - _SURROGATE_UPPER * upper, _SURROGATE_UPPER * upper - _SURROGATE_LOWER * lower])

    # start in equilibrium with the first input level
    u0 = signal.samples[0]
    x0 = np.array([(_SURROGATE_INFLOW * u0 / _SURROGATE_UPPER) ** 2, (_SURROGATE_INFLOW * u0 / _SURROGATE_LOWER) ** 2])
    times = signal.times
    field = OdeField(func, 2, breakpoints=signal.breakpoints())
    trajectory = integrate_adaptive(field, x0, (float(times[0]), float(times[-1])), 1e-8, 1e-10, times)
    y = trajectory.values()[:, 1] + rng.normal(0.0, noise, size=samples) if noise > 0 else trajectory.values()[:, 1]
    return TanksSeries(TimeSeries(times, y), signal)


def gen_tanks_surrogate(
    seed: int = 0,
    noise: float = 0.1,
    *,
    samples: int = TANKS_SAMPLES,
    period: float = TANKS_PERIOD,
    hold: int = 25,
) -> TanksDataset:
    """A dataset-free stand-in for the benchmark with the same layout.

    The input is a seeded staircase holding each level for ``hold`` samples;
    the output is the lower tank level plus Gaussian noise of standard
    deviation ``noise``.
    """
    if not noise >= 0:
        raise InvalidInput(f'noise must be nonnegative, got {noise!r}')
    if samples < 2 or hold < 1:
        raise InvalidInput('the surrogate needs at least two samples and a positive hold')

    rng = np.random.default_rng(seed)
    estimation = _surrogate_record(rng, samples, period, hold, noise)
    test = _surrogate_record(rng, samples, period, hold, noise)
    return TanksDataset(estimation, test)


@register('tanks')
def build(config: ExperimentConfig) -> Problem:
    spec = TanksSpec.from_config(config)
    period = float(config.get('tanks.period'))
    seed = int(config.get('seed'))
    if config.get('tanks.surrogate'):
        dataset = gen_tanks_surrogate(seed, float(config.get('tanks.noise')), period=period)
    else:
        dataset = load_tanks(config.get('data.path'), period)

    train, validation = dataset.estimation.split(spec.split)
    test = dataset.test

    def estimation_field(theta: MlpParams) -> OdeField:
        return tanks_field(theta, train.signal, spec)

    def test_field(theta: MlpParams) -> OdeField:
        return tanks_field(theta, test.signal, spec)

    hidden = list(config.get('network.hidden'))
    template = mlp_new([N_FEATURES, *hidden, 1], use_bias=bool(config.get('network.use_bias')), seed=seed)
    start = float(train.series.times[0])
    return Problem(
        name='tanks',
        data=train.series,
        template=template,
        field_builder=estimation_field,
        reg=reg_from_config(config),
        n_x=1,
        observed=(0,),
        splits=[
            Split('train', train.series, estimation_field),
            Split('validation', validation.series, estimation_field, t_start=start),
            Split('test', test.series, test_field, initial=config.get('tanks.test_initial')),
        ],
        extras={'tau_d': spec.tau_d, 'tau_i': spec.tau_i},
    )
