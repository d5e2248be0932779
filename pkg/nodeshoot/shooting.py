"""Single- and multiple-shooting objectives.

The fitting span is cut into intervals at the boundaries of a
:class:`ShootingGrid`. Each interval starts from its own shooting state and is
integrated independently; the data misfit is charged per interval and the
mismatch between an interval's end state and the next shooting state forms
the defect vector that the constrained solvers drive to zero.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd
from typing_extensions import TypeAlias

from .errors import InitializationError, IntegrationError, IntervalError, InvalidGrid, InvalidInput
from .network import MlpParams, RegSpec, regularizer
from .ode import OdeField, StepPlan, Trajectory, integrate_adaptive, integrate_fixed
from .tape import concat, is_var, stack, sumsq, value_of
from .utils.formats import plural

log = logging.getLogger(__name__)

FieldBuilder: TypeAlias = Callable[[MlpParams], OdeField]

# tolerance used when matching boundary times against observation times
_TIME_MATCH = 1e-9


class TimeSeries:
    """Observations at strictly increasing times.

    Attributes
    -----------
    times: numpy.ndarray
        Sample times in seconds.
    values: numpy.ndarray
        ``(n_times, n_obs)`` matrix of observations.
    """

    __slots__ = ('times', 'values')

    def __init__(self, times: Any, values: Any) -> None:
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)

        if times.ndim != 1 or len(times) == 0:
            raise InvalidInput('a time series needs a non-empty 1-D time vector')
        if values.shape[0] != len(times):
            raise InvalidInput(f'{len(times)} times but {values.shape[0]} observation rows')
        if np.any(np.diff(times) <= 0):
            raise InvalidInput('time series times must be strictly increasing')
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise InvalidInput('time series contains non-finite entries')

        self.times: np.ndarray = times
        self.values: np.ndarray = values

    def __len__(self) -> int:
        return len(self.times)

    def __repr__(self) -> str:
        return f'<TimeSeries n_times={len(self.times)} n_obs={self.n_obs} span=[{self.times[0]}, {self.times[-1]}]>'

    @property
    def n_obs(self) -> int:
        return self.values.shape[1]

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def index_of(self, t: float) -> Optional[int]:
        index = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[index] - t) <= _TIME_MATCH * max(1.0, abs(t)):
            return index
        return None

    def window(self, start: float, stop: float) -> TimeSeries:
        """Samples with ``start <= t < stop``."""
        mask = (self.times >= start) & (self.times < stop)
        return TimeSeries(self.times[mask], self.values[mask])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=[f'state_{i}' for i in range(self.n_obs)])
        frame.insert(0, 't', self.times)
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> TimeSeries:
        if 't' not in frame.columns:
            raise InvalidInput('time series table needs a "t" column')
        columns = [c for c in frame.columns if c.startswith('state_')]
        if not columns:
            raise InvalidInput('time series table has no state_* columns')
        return cls(frame['t'].to_numpy(dtype=float), frame[columns].to_numpy(dtype=float))


class ShootingGrid:
    """Boundaries ``t0 = tau_0 < tau_1 < ... < tau_N = tf``."""

    __slots__ = ('boundaries',)

    def __init__(self, boundaries: Sequence[float]) -> None:
        boundaries = np.asarray(boundaries, dtype=float)
        if boundaries.ndim != 1 or len(boundaries) < 2:
            raise InvalidGrid('a shooting grid needs at least two boundaries')
        if np.any(np.diff(boundaries) <= 0):
            raise InvalidGrid('shooting boundaries must be strictly increasing')
        self.boundaries: np.ndarray = boundaries

    def __repr__(self) -> str:
        return f'<ShootingGrid intervals={self.n_intervals} span=[{self.boundaries[0]}, {self.boundaries[-1]}]>'

    @property
    def n_intervals(self) -> int:
        return len(self.boundaries) - 1

    def interval(self, i: int) -> tuple[float, float]:
        """Start and end of interval ``i`` (zero-based)."""
        return float(self.boundaries[i]), float(self.boundaries[i + 1])


class ShootingDecision:
    """Network parameters plus one shooting state per interval start.

    ``states[0]`` is the global initial state.
    """

    __slots__ = ('theta', 'states')

    def __init__(self, theta: MlpParams, states: Any) -> None:
        self.theta: MlpParams = theta
        self.states: Any = states

    def __repr__(self) -> str:
        return f'<ShootingDecision theta={self.theta!r} intervals={len(self.states)}>'


class DefectVector:
    """Concatenated ``x_f(i) - s(i+1)`` for the interior boundaries, in raw state units."""

    __slots__ = ('values', 'boundary_times', 'n_x')

    def __init__(self, values: Any, boundary_times: Sequence[float], n_x: int) -> None:
        self.values: Any = values
        self.boundary_times: np.ndarray = np.asarray(boundary_times, dtype=float)
        self.n_x: int = n_x

    def __len__(self) -> int:
        return len(self.boundary_times) * self.n_x

    def __repr__(self) -> str:
        return f'<DefectVector boundaries={len(self.boundary_times)} max={self.max_abs():.3e}>'

    def max_abs(self) -> float:
        values = value_of(self.values)
        return float(np.max(np.abs(values))) if values.size else 0.0

    def to_frame(self) -> pd.DataFrame:
        values = value_of(self.values).reshape(len(self.boundary_times), self.n_x)
        return pd.DataFrame(
            {
                'boundary_time': np.repeat(self.boundary_times, self.n_x),
                'component': np.tile(np.arange(self.n_x), len(self.boundary_times)),
                'defect': values.ravel(),
            }
        )


@dataclass
class ShootingResult:
    cost: Any
    sse: Any
    regularization: Any
    defects: DefectVector
    stitched: Trajectory
    owners: np.ndarray

    def trajectory_frame(self) -> pd.DataFrame:
        states = self.stitched.values()
        frame = pd.DataFrame(states, columns=[f'state_{i}' for i in range(states.shape[1])])
        frame.insert(0, 't', self.stitched.times)
        frame['interval'] = self.owners
        return frame


def make_grid(span: Sequence[float], n_intervals: int, data_times: Sequence[float], *, snap: bool = True) -> ShootingGrid:
    """Uniform boundaries over ``span``, each snapped to the nearest data time."""
    if n_intervals < 1:
        raise InvalidGrid(f'at least one interval is required, got {n_intervals}')

    t0, tf = float(span[0]), float(span[1])
    if not tf > t0:
        raise InvalidGrid(f'grid span must be increasing, got [{t0}, {tf}]')

    uniform = np.linspace(t0, tf, n_intervals + 1)
    if not snap:
        return ShootingGrid(uniform)

    times = np.asarray(data_times, dtype=float)
    if len(times) == 0 or times[0] > t0 + _TIME_MATCH or times[-1] < tf - _TIME_MATCH:
        raise InvalidGrid(f'data times do not cover the span [{t0}, {tf}]')

    snapped = times[np.abs(times[None, :] - uniform[:, None]).argmin(axis=1)]
    if np.any(np.diff(snapped) <= 0):
        raise InvalidGrid(f'{n_intervals} intervals is too many for distinct snapped boundaries on this data')
    return ShootingGrid(snapped)


def embed_observation(row: np.ndarray, n_x: int, observed: Sequence[int], fallback: float = 0.0) -> np.ndarray:
    state = np.full(n_x, float(fallback))
    state[list(observed)] = row
    return state


def init_decision(
    grid: ShootingGrid,
    data: TimeSeries,
    strategy: str,
    theta0: MlpParams,
    *,
    n_x: Optional[int] = None,
    observed: Optional[Sequence[int]] = None,
    fallback: float = 0.0,
) -> ShootingDecision:
    """Initial shooting states.

    ``replicate_x0`` copies the first observation into every state;
    ``data_at_boundaries`` uses the observation at each interval start.
    Unobserved state components take ``fallback``.
    """
    n_x = data.n_obs if n_x is None else n_x
    observed = tuple(range(data.n_obs)) if observed is None else tuple(observed)
    starts = grid.boundaries[:-1]

    if strategy == 'replicate_x0':
        first = embed_observation(data.values[0], n_x, observed, fallback)
        states = np.tile(first, (len(starts), 1))
    elif strategy == 'data_at_boundaries':
        rows = []
        for t in starts:
            index = data.index_of(float(t))
            if index is None:
                raise InitializationError(float(t))
            rows.append(embed_observation(data.values[index], n_x, observed, fallback))
        states = np.stack(rows)
    else:
        raise InvalidInput(f'unknown initialisation strategy {strategy!r}')

    return ShootingDecision(theta0, states)


def sse(pred: Any, obs: Any) -> Any:
    """Sum of squared errors; works on tape variables."""
    if value_of(pred).shape != np.shape(obs):
        raise InvalidInput(f'shape mismatch: prediction {value_of(pred).shape} vs observation {np.shape(obs)}')
    return sumsq(pred - obs)


def rmse(pred: Any, obs: Any) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if pred.shape != obs.shape:
        raise InvalidInput(f'shape mismatch: prediction {pred.shape} vs observation {obs.shape}')
    if pred.size == 0:
        raise InvalidInput('root-mean-square error of an empty series')
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


def partition(grid: ShootingGrid, data: TimeSeries) -> list[np.ndarray]:
    """Data indices owned by each interval.

    An interval owns its left boundary and excludes its right one, except the
    last interval which also owns the final boundary. Every observation inside
    the span is owned exactly once.
    """
    owners = []
    last = grid.n_intervals - 1
    for i in range(grid.n_intervals):
        start, stop = grid.interval(i)
        if i == last:
            mask = (data.times >= start - _TIME_MATCH) & (data.times <= stop + _TIME_MATCH)
        else:
            mask = (data.times >= start - _TIME_MATCH) & (data.times < stop - _TIME_MATCH)
        owners.append(np.flatnonzero(mask))
    return owners


def _integrate_interval(
    index: int,
    field: OdeField,
    start_state: Any,
    grid: ShootingGrid,
    data: TimeSeries,
    owned: np.ndarray,
    plan: StepPlan,
) -> tuple[Trajectory, np.ndarray]:
    start, stop = grid.interval(index)
    owned_times = np.clip(data.times[owned], start, stop)
    saves = sorted({start, stop, *(float(t) for t in owned_times)})
    try:
        trajectory = integrate_fixed(field, start_state, (start, stop), plan, saves)
    except IntegrationError as e:
        raise IntervalError(index, e) from e
    return trajectory, np.searchsorted(trajectory.times, owned_times)


def evaluate(
    field_builder: FieldBuilder,
    decision: ShootingDecision,
    grid: ShootingGrid,
    data: TimeSeries,
    reg: RegSpec,
    plan: StepPlan,
    *,
    observed: Optional[Sequence[int]] = None,
    workers: int = 1,
    order: Optional[Sequence[int]] = None,
) -> ShootingResult:
    """Multiple-shooting cost, defects and stitched trajectory.

    With a single interval this is exactly the single-shooting objective. The
    cost is the SSE over all observations plus the weighted regularizer.
    Intervals may be integrated in any ``order`` or concurrently when nothing
    is being recorded; results are always reduced in interval order.
    """
    n_intervals = grid.n_intervals
    states = decision.states
    if len(states) != n_intervals:
        raise InvalidInput(f'{len(states)} shooting states for {plural(n_intervals):interval}')

    field = field_builder(decision.theta)
    observed = tuple(range(field.n_x)) if observed is None else tuple(observed)
    owners = partition(grid, data)
    order = list(range(n_intervals)) if order is None else list(order)
    if sorted(order) != list(range(n_intervals)):
        raise InvalidInput('interval order must be a permutation of the interval indices')

    plan = plan.with_boundaries(grid.boundaries)
    recorded = any(is_var(s) for s in states) or any(is_var(w) for w in decision.theta.weights)

    def run(i: int) -> tuple[Trajectory, np.ndarray]:
        return _integrate_interval(i, field, states[i], grid, data, owners[i], plan)

    solved: dict[int, tuple[Trajectory, np.ndarray]] = {}
    if workers > 1 and not recorded and n_intervals > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            for i, outcome in zip(order, executor.map(run, order)):
                solved[i] = outcome
    else:
        for i in order:
            solved[i] = run(i)

    misfit: Any = 0.0
    defect_parts: list[Any] = []
    rows: list[Any] = []
    for i in range(n_intervals):
        trajectory, positions = solved[i]
        owned = owners[i]
        if len(owned):
            predicted = trajectory.states[positions.tolist()]
            rows.append(predicted)
            if len(observed) != field.n_x:
                predicted = _columns(predicted, observed)
            misfit = misfit + sse(predicted, data.values[owned])
        if i + 1 < n_intervals:
            defect_parts.append(trajectory.states[len(trajectory.times) - 1] - states[i + 1])

    stitched_states = concat_rows(rows, field.n_x)
    owned_all = np.concatenate(owners) if owners else np.zeros(0, dtype=int)
    labels = np.concatenate([np.full(len(o), i) for i, o in enumerate(owners)]) if owners else np.zeros(0, dtype=int)
    stitched = Trajectory(data.times[owned_all], stitched_states)

    reg_value: Any = 0.0
    if reg.weight > 0 and reg.kind != 'none':
        reg_value = regularizer(decision.theta, reg)
    cost = misfit + reg.weight * reg_value if reg.weight > 0 else misfit

    defect_values = concat(defect_parts) if defect_parts else np.zeros(0)
    defects = DefectVector(defect_values, grid.boundaries[1:-1], field.n_x)
    log.debug('evaluated %d shooting intervals, max defect %.3e', n_intervals, defects.max_abs())
    return ShootingResult(cost, misfit, reg_value, defects, stitched, labels)


def _columns(matrix: Any, columns: Sequence[int]) -> Any:
    if is_var(matrix):
        return stack([matrix[:, c] for c in columns]).T
    return np.asarray(matrix)[:, list(columns)]


def concat_rows(blocks: Sequence[Any], n_x: int) -> Any:
    if not blocks:
        return np.zeros((0, n_x))
    flat = concat([b.reshape(-1) if is_var(b) else np.asarray(b).reshape(-1) for b in blocks])
    return flat.reshape(-1, n_x) if is_var(flat) else np.asarray(flat).reshape(-1, n_x)


class ShootingProblem:
    """Packs a shooting decision into a flat vector ``z = [theta; s_1; ...; s_N]``.

    When the initial state is pinned, ``s_1`` is fixed and left out of ``z``.
    :meth:`program` maps ``z`` to ``(C, h)`` and runs on plain arrays or on a
    tape, which is what the optimizers consume.
    """

    def __init__(
        self,
        data: TimeSeries,
        grid: ShootingGrid,
        field_builder: FieldBuilder,
        template: MlpParams,
        *,
        reg: RegSpec,
        plan: StepPlan,
        n_x: Optional[int] = None,
        observed: Optional[Sequence[int]] = None,
        pinned_initial: Optional[Sequence[float]] = None,
        workers: int = 1,
    ) -> None:
        self.data: TimeSeries = data
        self.grid: ShootingGrid = grid
        self.field_builder: FieldBuilder = field_builder
        self.template: MlpParams = template
        self.reg: RegSpec = reg
        self.plan: StepPlan = plan
        self.n_x: int = data.n_obs if n_x is None else n_x
        self.observed: tuple[int, ...] = tuple(range(data.n_obs)) if observed is None else tuple(observed)
        self.pinned_initial: Optional[np.ndarray] = (
            None if pinned_initial is None else np.asarray(pinned_initial, dtype=float).reshape(self.n_x)
        )
        self.workers: int = workers

    def __repr__(self) -> str:
        return f'<ShootingProblem intervals={self.n_intervals} n_theta={self.n_theta} size={self.size}>'

    @property
    def n_intervals(self) -> int:
        return self.grid.n_intervals

    @property
    def n_theta(self) -> int:
        return self.template.n_params

    @property
    def n_free_states(self) -> int:
        return self.n_intervals - (1 if self.pinned_initial is not None else 0)

    @property
    def size(self) -> int:
        return self.n_theta + self.n_free_states * self.n_x

    def pack(self, decision: ShootingDecision) -> np.ndarray:
        states = np.asarray(value_of(decision.states), dtype=float).reshape(self.n_intervals, self.n_x)
        if self.pinned_initial is not None:
            states = states[1:]
        return np.concatenate([decision.theta.flatten(), states.ravel()])

    def unpack(self, z: Any) -> ShootingDecision:
        if len(z) != self.size:
            raise InvalidInput(f'decision vector has length {len(z)}, expected {self.size}')

        theta = self.template.unflatten(z[: self.n_theta])
        rows: list[Any] = []
        if self.pinned_initial is not None:
            rows.append(self.pinned_initial)
        for k in range(self.n_free_states):
            start = self.n_theta + k * self.n_x
            rows.append(z[start : start + self.n_x])
        return ShootingDecision(theta, rows)

    def decision(self, z: Any) -> ShootingDecision:
        """Plain-valued decision for reporting and checkpoints."""
        unpacked = self.unpack(np.asarray(value_of(z), dtype=float))
        return ShootingDecision(unpacked.theta, np.stack([np.asarray(r, dtype=float) for r in unpacked.states]))

    def evaluate(self, z: Any, *, order: Optional[Sequence[int]] = None) -> ShootingResult:
        return evaluate(
            self.field_builder,
            self.unpack(z),
            self.grid,
            self.data,
            self.reg,
            self.plan,
            observed=self.observed,
            workers=self.workers,
            order=order,
        )

    def program(self, z: Any) -> tuple[Any, Any]:
        result = self.evaluate(z)
        return result.cost, result.defects.values


def simulate(
    field: OdeField,
    x0: Any,
    times: Sequence[float],
    *,
    plan: Optional[StepPlan] = None,
    rtol: float = 1e-8,
    atol: float = 1e-10,
) -> Trajectory:
    """One initial value problem from ``times[0]``, saved at every time.

    Adaptive unless a fixed-step ``plan`` is given.
    """
    times = np.asarray(times, dtype=float)
    span = (float(times[0]), float(times[-1]))
    if plan is not None:
        return integrate_fixed(field, np.asarray(x0, dtype=float), span, plan, times)
    return integrate_adaptive(field, x0, span, rtol, atol, times)
