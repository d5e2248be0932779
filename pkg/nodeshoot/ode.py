"""Explicit Runge-Kutta integration with deterministic, landing-exact step sequences."""

from __future__ import annotations

import logging
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np
from typing_extensions import TypeAlias

from .errors import IntegrationError, InvalidInput
from .tape import is_finite, stack, value_of
from .utils import cache

log = logging.getLogger(__name__)

# relative slack used when deciding whether a step would overshoot a landmark
_LANDING_SLACK = 1e-9

FieldFunc: TypeAlias = Callable[[Any, float, float], Any]


class OdeField:
    """The right-hand side ``dx/dt = f(x, t)`` of a first-order system.

    ``func`` receives the state, the evaluation time and the midpoint of the
    step being taken. Piecewise-constant inputs should be read at the midpoint
    so they keep a single value for the whole step; everything else uses the
    evaluation time.

    Attributes
    -----------
    n_x: int
        The state dimension.
    breakpoints: tuple[float, ...]
        Times at which the right-hand side may jump. Integrators land on them exactly.
    """

    __slots__ = ('func', 'n_x', 'breakpoints')

    def __init__(self, func: FieldFunc, n_x: int, *, breakpoints: Iterable[float] = ()) -> None:
        if n_x <= 0:
            raise InvalidInput(f'state dimension must be positive, got {n_x}')
        self.func: FieldFunc = func
        self.n_x: int = n_x
        self.breakpoints: tuple[float, ...] = tuple(sorted(float(b) for b in breakpoints))

    @classmethod
    def from_autonomous(cls, func: Callable[[Any], Any], n_x: int) -> OdeField:
        return cls(lambda x, t, t_mid: func(x), n_x)

    @classmethod
    def from_time(cls, func: Callable[[Any, float], Any], n_x: int, *, breakpoints: Iterable[float] = ()) -> OdeField:
        return cls(lambda x, t, t_mid: func(x, t), n_x, breakpoints=breakpoints)

    def __repr__(self) -> str:
        return f'<OdeField n_x={self.n_x} breakpoints={len(self.breakpoints)}>'

    def eval(self, x: Any, t: float, t_mid: Optional[float] = None) -> Any:
        return self.func(x, t, t if t_mid is None else t_mid)


class Trajectory:
    """States saved at a sorted list of times.

    ``states`` is an ``(n_times, n_x)`` matrix, or a recorded tape variable
    when the trajectory was computed for differentiation.
    """

    __slots__ = ('times', 'states')

    def __init__(self, times: Any, states: Any) -> None:
        self.times: np.ndarray = np.asarray(times, dtype=float)
        self.states: Any = states

    def __len__(self) -> int:
        return len(self.times)

    def __repr__(self) -> str:
        return f'<Trajectory n_times={len(self.times)}>'

    def values(self) -> np.ndarray:
        return value_of(self.states).reshape(len(self.times), -1)

    def state_at(self, t: float) -> np.ndarray:
        index = int(np.searchsorted(self.times, t))
        if index >= len(self.times) or self.times[index] != t:
            raise InvalidInput(f'no saved state at t={t!r}')
        return self.values()[index]


@cache.cache(maxsize=512)
def _step_sequence(t0: float, tf: float, h: float, landmarks: tuple[float, ...]) -> np.ndarray:
    times = [t0]
    for stop in (*landmarks, tf):
        start = times[-1]
        k = 1
        while start + k * h < stop - _LANDING_SLACK * h:
            times.append(start + k * h)
            k += 1
        times.append(stop)

    result = np.array(times, dtype=float)
    result.setflags(write=False)
    return result


class StepPlan:
    """A nominal step size plus times the stepper must land on exactly.

    Between consecutive landing points the stepper takes full steps of
    size ``h`` and shortens the last one so it ends on the landing point.
    """

    __slots__ = ('h', 'boundaries')

    def __init__(self, h: float, boundaries: Iterable[float] = ()) -> None:
        if not h > 0:
            raise InvalidInput(f'step size must be positive, got {h!r}')
        self.h: float = float(h)
        self.boundaries: tuple[float, ...] = tuple(sorted(set(float(b) for b in boundaries)))

    def __repr__(self) -> str:
        return f'<StepPlan h={self.h} boundaries={len(self.boundaries)}>'

    def with_boundaries(self, extra: Iterable[float]) -> StepPlan:
        return StepPlan(self.h, (*self.boundaries, *extra))

    def step_times(self, t0: float, tf: float, landmarks: Iterable[float] = ()) -> np.ndarray:
        """The full step sequence from ``t0`` to ``tf``, both included."""
        t0, tf = float(t0), float(tf)
        inner = {float(b) for b in (*self.boundaries, *landmarks) if t0 < b < tf}
        return _step_sequence(t0, tf, self.h, tuple(sorted(inner)))


def rk4_step(field: OdeField, x: Any, t: float, h: float) -> Any:
    """One classical four-stage Runge-Kutta step from ``(t, x)``."""
    if not h > 0:
        raise InvalidInput(f'step size must be positive, got {h!r}')

    half = 0.5 * h
    t_mid = t + half
    k1 = field.eval(x, t, t_mid)
    k2 = field.eval(x + half * k1, t_mid, t_mid)
    k3 = field.eval(x + half * k2, t_mid, t_mid)
    k4 = field.eval(x + h * k3, t + h, t_mid)
    if not (is_finite(k1) and is_finite(k2) and is_finite(k3) and is_finite(k4)):
        raise IntegrationError(t)

    result = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not is_finite(result):
        raise IntegrationError(t)
    return result


def _check_save_times(span: Sequence[float], save_times: Sequence[float]) -> np.ndarray:
    t0, tf = float(span[0]), float(span[1])
    if not tf > t0:
        raise InvalidInput(f'integration span must be increasing, got [{t0}, {tf}]')

    saves = np.asarray(save_times, dtype=float)
    if saves.size and (np.any(np.diff(saves) <= 0) or saves[0] < t0 or saves[-1] > tf):
        raise InvalidInput('save times must be strictly increasing and inside the span')
    return saves


def integrate_fixed(
    field: OdeField, x0: Any, span: Sequence[float], plan: StepPlan, save_times: Sequence[float]
) -> Trajectory:
    """Repeated :func:`rk4_step` along the plan's step sequence.

    Save times and field breakpoints are added to the landing points, so every
    saved state is an exact step end, never an interpolation. The result is
    differentiable when ``x0`` or the field records onto a tape.
    """
    saves = _check_save_times(span, save_times)
    t0, tf = float(span[0]), float(span[1])
    sequence = plan.step_times(t0, tf, (*saves, *field.breakpoints))

    rows: list[Any] = []
    cursor = 0
    x = x0
    if not is_finite(x):
        raise IntegrationError(t0)

    if cursor < len(saves) and saves[cursor] == t0:
        rows.append(x)
        cursor += 1

    for i in range(len(sequence) - 1):
        t = float(sequence[i])
        x = rk4_step(field, x, t, float(sequence[i + 1]) - t)
        while cursor < len(saves) and saves[cursor] == sequence[i + 1]:
            rows.append(x)
            cursor += 1

    if cursor != len(saves):
        raise InvalidInput(f'save time {saves[cursor]!r} is not on the step sequence')

    states = stack(rows) if rows else np.zeros((0, field.n_x))
    return Trajectory(saves, states)


# Dormand-Prince 5(4) tableau
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B_HAT = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_DP_E = _DP_B - _DP_B_HAT

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
_ALPHA = 0.7 / 5.0
_BETA = 0.4 / 5.0


def _initial_step(field: OdeField, x0: np.ndarray, t0: float, f0: np.ndarray, rtol: float, atol: float) -> float:
    scale = atol + rtol * np.abs(x0)
    d0 = np.sqrt(np.mean((x0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = np.asarray(field.eval(x0 + h0 * f0, t0 + h0, t0 + 0.5 * h0), dtype=float)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100.0 * h0, h1)


def integrate_adaptive(
    field: OdeField,
    x0: Any,
    span: Sequence[float],
    rtol: float,
    atol: float,
    save_times: Sequence[float],
    *,
    max_steps: int = 1_000_000,
) -> Trajectory:
    """Dormand-Prince 5(4) integration with PI step-size control.

    Accepted steps satisfy ``|err_i| <= atol + rtol * max(|x_i|, |x_new_i|)``
    for every component. Steps are clipped to land exactly on save times and
    field breakpoints. Plain arrays only; this path is not differentiated.
    """
    if not (rtol > 0 and atol > 0):
        raise InvalidInput('tolerances must be positive')

    saves = _check_save_times(span, save_times)
    t0, tf = float(span[0]), float(span[1])
    landmarks = sorted({float(b) for b in (*saves, *field.breakpoints) if t0 < b < tf} | {tf})
    h_min = 1e-12 * (tf - t0)

    x = np.array(value_of(x0), dtype=float)
    t = t0
    rows: list[np.ndarray] = []
    cursor = 0
    if cursor < len(saves) and saves[cursor] == t0:
        rows.append(x.copy())
        cursor += 1

    f = np.asarray(field.eval(x, t, t), dtype=float)
    if not np.all(np.isfinite(f)):
        raise IntegrationError(t)

    h = _initial_step(field, x, t, f, rtol, atol)
    fsal = not field.breakpoints
    err_prev = 1.0
    target = 0
    steps = 0
    stages = np.empty((7, x.size))
    while target < len(landmarks):
        stop = landmarks[target]
        if steps >= max_steps:
            raise IntegrationError(t, f'step budget of {max_steps} exhausted at t={t!r}')
        if h < h_min:
            raise IntegrationError(t, f'step size underflow at t={t!r} (h={h:.3e}); the problem may be stiff')

        landing = t + h >= stop - _LANDING_SLACK * h
        step = stop - t if landing else h
        t_mid = t + 0.5 * step

        stages[0] = f if fsal else np.asarray(field.eval(x, t, t_mid), dtype=float)
        for i in range(1, 7):
            increment = sum(a * stages[j] for j, a in enumerate(_DP_A[i]))
            stages[i] = field.eval(x + step * increment, t + _DP_C[i] * step, t_mid)

        x_new = x + step * (_DP_B @ stages)
        if not (np.all(np.isfinite(stages)) and np.all(np.isfinite(x_new))):
            h = step * MIN_FACTOR
            err_prev = 1.0
            steps += 1
            continue

        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = float(np.max(np.abs(step * (_DP_E @ stages)) / scale)) if x.size else 0.0
        steps += 1
        if err <= 1.0:
            t = stop if landing else t + step
            x = x_new
            f = stages[6].copy()
            if err == 0.0:
                factor = MAX_FACTOR
            else:
                factor = SAFETY * err**-_ALPHA * err_prev**_BETA
                factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
            err_prev = max(err, 1e-4)
            h = step * factor if not landing else max(h, step * factor)
            if landing:
                target += 1
                while cursor < len(saves) and saves[cursor] == t:
                    rows.append(x.copy())
                    cursor += 1
        else:
            h = step * max(MIN_FACTOR, SAFETY * err ** (-1.0 / 5.0))

    log.debug('adaptive integration over [%s, %s] took %d steps', t0, tf, steps)
    states = np.stack(rows) if rows else np.zeros((0, field.n_x))
    return Trajectory(saves, states)
