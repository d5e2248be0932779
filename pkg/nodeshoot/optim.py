"""Unconstrained minimizers and the constrained solvers built on them.

Every minimizer consumes a function returning ``(value, gradient)``. The
constrained solvers take a *program* ``z -> (C, h)`` written against the tape
helpers and wrap it into a penalty or augmented-Lagrangian objective.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd
from typing_extensions import TypeAlias

from .errors import InvalidInput, OptimizerError
from .tape import absolute, dot, grad, maxabs, sqrt, sumsq, total, value_of

log = logging.getLogger(__name__)

ValueAndGrad: TypeAlias = Callable[[np.ndarray], tuple[float, np.ndarray]]
Program: TypeAlias = Callable[[Any], tuple[Any, Any]]
Callback: TypeAlias = Callable[[int, np.ndarray, float, np.ndarray], None]


class Status(enum.Enum):
    gradient_tolerance = 'gradient tolerance'
    iteration_budget = 'iteration budget'
    evaluation_budget = 'evaluation budget'
    line_search_failure = 'line search failure'
    non_finite = 'non-finite objective'

    def __str__(self) -> str:
        return self.value


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    status: Status
    iterations: int
    evaluations: int
    steps: list[WolfeRecord] = field(default_factory=list)


# Adam / Nadam


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    nesterov: bool = False
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0


def adam_step(z: np.ndarray, gradient: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; the Nadam look-ahead when ``state.nesterov`` is set."""
    z = np.asarray(z, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != z.shape:
        raise InvalidInput(f'gradient shape {gradient.shape} does not match decision shape {z.shape}')
    if not np.all(np.isfinite(gradient)):
        raise OptimizerError('non-finite gradient passed to Adam')

    m = np.zeros_like(z) if state.m is None else state.m
    v = np.zeros_like(z) if state.v is None else state.v
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2

    m = b1 * m + (1.0 - b1) * gradient
    v = b2 * v + (1.0 - b2) * gradient * gradient
    v_hat = v / (1.0 - b2**t)
    if state.nesterov:
        m_hat = b1 * m / (1.0 - b1 ** (t + 1)) + (1.0 - b1) * gradient / (1.0 - b1**t)
    else:
        m_hat = m / (1.0 - b1**t)

    z_new = z - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return z_new, dataclasses.replace(state, m=m, v=v, step=t)


def adam_minimize(
    fun: ValueAndGrad,
    z0: np.ndarray,
    state: AdamState,
    iterations: int,
    *,
    callback: Optional[Callback] = None,
) -> OptimizeResult:
    """Fixed-budget first-order descent; returns the best iterate seen."""
    z = np.array(z0, dtype=float)
    value, gradient = fun(z)
    if not math.isfinite(value):
        raise OptimizerError('objective is not finite at the starting point')

    best = (value, z.copy(), gradient.copy())
    status = Status.iteration_budget
    done = 0
    for k in range(iterations):
        z, state = adam_step(z, gradient, state)
        value, gradient = fun(z)
        done = k + 1
        if not (math.isfinite(value) and np.all(np.isfinite(gradient))):
            log.warning('Adam iterate %d produced a non-finite objective, stopping', done)
            status = Status.non_finite
            break
        if value < best[0]:
            best = (value, z.copy(), gradient.copy())
        if callback is not None:
            callback(k + 1, z, value, gradient)

    return OptimizeResult(best[1], best[0], best[2], status, done, done + 1)


# L-BFGS


@dataclass
class WolfeRecord:
    alpha: float
    value0: float
    slope0: float
    value: float
    slope: float

    def satisfies(self, c1: float, c2: float) -> bool:
        armijo = self.value <= self.value0 + c1 * self.alpha * self.slope0 + 1e-12 * abs(self.value0)
        curvature = abs(self.slope) <= c2 * abs(self.slope0)
        return armijo and curvature


@dataclass
class LbfgsState:
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_iter: int = 200
    max_eval: int = 2000
    gtol: float = 1e-6
    pairs: deque[tuple[np.ndarray, np.ndarray]] = field(default_factory=deque)

    def reset(self) -> None:
        self.pairs.clear()


class _LineSearchFailed(Exception):
    pass


def _cubic_minimizer(a: float, fa: float, da: float, b: float, fb: float, db: float) -> Optional[float]:
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    radicand = d1 * d1 - da * db
    if not math.isfinite(radicand) or radicand < 0:
        return None
    d2 = math.copysign(math.sqrt(radicand), b - a)
    denominator = db - da + 2.0 * d2
    if denominator == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denominator


class _Counter:
    __slots__ = ('fun', 'evaluations', 'budget')

    def __init__(self, fun: ValueAndGrad, budget: int) -> None:
        self.fun = fun
        self.evaluations = 0
        self.budget = budget

    def __call__(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        if self.evaluations >= self.budget:
            raise _LineSearchFailed('evaluation budget')
        self.evaluations += 1
        return self.fun(z)


def strong_wolfe(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    direction: np.ndarray,
    value0: float,
    slope0: float,
    alpha0: float,
    c1: float,
    c2: float,
    *,
    max_trials: int = 30,
) -> tuple[float, float, np.ndarray]:
    """Bracketing line search followed by a safeguarded cubic zoom.

    Returns ``(alpha, value, gradient)`` at a step satisfying both strong Wolfe conditions.
    """

    def phi(alpha: float) -> tuple[float, np.ndarray, float]:
        value, gradient = fun(x + alpha * direction)
        return value, gradient, float(gradient @ direction)

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi):
        for _ in range(max_trials):
            width = hi - lo
            alpha = None
            if math.isfinite(f_hi) and math.isfinite(d_hi):
                alpha = _cubic_minimizer(lo, f_lo, d_lo, hi, f_hi, d_hi)
            left, right = min(lo, hi), max(lo, hi)
            margin = 0.1 * abs(width)
            if alpha is None or not (left + margin <= alpha <= right - margin):
                alpha = lo + 0.5 * width

            value, gradient, slope = phi(alpha)
            if not math.isfinite(value) or value > value0 + c1 * alpha * slope0 or value >= f_lo:
                hi, f_hi, d_hi = alpha, value, slope
            else:
                if abs(slope) <= -c2 * slope0:
                    return alpha, value, gradient
                if slope * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = alpha, value, slope

            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        raise _LineSearchFailed('zoom did not converge')

    previous, f_previous, d_previous = 0.0, value0, slope0
    alpha = alpha0
    for trial in range(max_trials):
        value, gradient, slope = phi(alpha)
        if not math.isfinite(value) or value > value0 + c1 * alpha * slope0 or (trial > 0 and value >= f_previous):
            return zoom(previous, f_previous, d_previous, alpha, value, slope)
        if abs(slope) <= -c2 * slope0:
            return alpha, value, gradient
        if slope >= 0:
            return zoom(alpha, value, slope, previous, f_previous, d_previous)
        previous, f_previous, d_previous = alpha, value, slope
        alpha *= 2.0

    raise _LineSearchFailed('bracketing did not terminate')


def _two_loop(gradient: np.ndarray, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    q = gradient.copy()
    alphas = []
    for s, y in reversed(pairs):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y

    if pairs:
        s, y = pairs[-1]
        q *= float(s @ y) / float(y @ y)

    for (s, y), (rho, a) in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(
    fun: ValueAndGrad,
    z0: np.ndarray,
    state: LbfgsState,
    *,
    callback: Optional[Callback] = None,
) -> OptimizeResult:
    """Limited-memory BFGS with a strong Wolfe line search.

    Stops on ``max|grad| <= gtol``, the iteration or evaluation budget, or a
    failed line search; the status says which. Curvature pairs persist in
    ``state`` so an outer loop can warm-start the next solve.
    """
    counted = _Counter(fun, state.max_eval)
    x = np.array(z0, dtype=float)
    value, gradient = counted(x)
    if not (math.isfinite(value) and np.all(np.isfinite(gradient))):
        raise OptimizerError('objective or gradient is not finite at the starting point')

    steps: list[WolfeRecord] = []
    status = Status.iteration_budget
    iterations = 0
    while iterations < state.max_iter:
        if float(np.max(np.abs(gradient), initial=0.0)) <= state.gtol:
            status = Status.gradient_tolerance
            break

        direction = _two_loop(gradient, state.pairs)
        slope = float(gradient @ direction)
        if not slope < 0:
            # not a descent direction: drop the memory and fall back to steepest descent
            state.reset()
            direction = -gradient
            slope = float(gradient @ direction)

        alpha0 = 1.0 if state.pairs else min(1.0, 1.0 / max(1.0, float(np.linalg.norm(gradient))))
        try:
            alpha, new_value, new_gradient = strong_wolfe(counted, x, direction, value, slope, alpha0, state.c1, state.c2)
        except _LineSearchFailed as e:
            status = Status.evaluation_budget if counted.evaluations >= counted.budget else Status.line_search_failure
            log.debug('line search failed at iteration %d: %s', iterations, e)
            break

        steps.append(WolfeRecord(alpha, value, slope, new_value, float(new_gradient @ direction)))
        s = alpha * direction
        y = new_gradient - gradient
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            state.pairs.append((s, y))
            while len(state.pairs) > state.memory:
                state.pairs.popleft()

        x = x + s
        value, gradient = new_value, new_gradient
        iterations += 1
        if callback is not None:
            callback(iterations, x, value, gradient)
    else:
        if float(np.max(np.abs(gradient), initial=0.0)) <= state.gtol:
            status = Status.gradient_tolerance

    return OptimizeResult(x, value, gradient, status, iterations, counted.evaluations, steps)


# constrained objectives

PENALTY_KINDS = ('quadratic', 'l1', 'l2', 'linf')


def penalty_objective(cost: Any, defects: Any, rho: float, kind: str = 'quadratic') -> Any:
    """``C + rho * Q(h)`` with a quadratic, l1, l2 (not squared) or max-norm ``Q``."""
    if not rho >= 0:
        raise InvalidInput(f'penalty weight must be nonnegative, got {rho!r}')
    if kind == 'quadratic':
        term = sumsq(defects)
    elif kind == 'l1':
        term = total(absolute(defects))
    elif kind == 'l2':
        term = sqrt(sumsq(defects))
    elif kind == 'linf':
        term = maxabs(defects)
    else:
        raise InvalidInput(f'unknown penalty kind {kind!r}')
    return cost + rho * term


def auglag_objective(cost: Any, defects: Any, multipliers: Any, rho: Any) -> Any:
    """``C + h^T v + rho * h^T h``; no one-half on the quadratic term."""
    if np.shape(value_of(defects)) != np.shape(value_of(multipliers)):
        raise InvalidInput('multiplier and defect vectors must have the same length')
    return cost + dot(defects, multipliers) + rho * sumsq(defects)


# training log


class TrainingLog:
    """Per-iteration records of the constrained solve.

    Records are echoed through logging every ``log_every`` entries.
    """

    COLUMNS = ('outer', 'inner', 'cost', 'max_defect', 'rho', 'grad_norm')

    def __init__(self, *, log_every: int = 10) -> None:
        self.log_every: int = max(1, int(log_every))
        self.records: list[tuple[int, int, float, float, float, float]] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, outer: int, inner: int, cost: float, max_defect: float, rho: float, grad_norm: float) -> None:
        self.records.append((outer, inner, cost, max_defect, rho, grad_norm))
        if len(self.records) % self.log_every == 0:
            log.info(
                'outer %d inner %d: cost %.6g, max defect %.3e, rho %.3g, |grad| %.3e',
                outer,
                inner,
                cost,
                max_defect,
                rho,
                grad_norm,
            )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=list(self.COLUMNS))


class _TracedObjective:
    """Tapes ``combine(*program(z))`` and remembers the last ``C`` and ``h`` values."""

    def __init__(self, program: Program, combine: Callable[[Any, Any], Any]) -> None:
        self.program = program
        self.combine = combine
        self.cost: float = math.nan
        self.max_defect: float = math.nan

    def _phi(self, z: Any) -> Any:
        cost, defects = self.program(z)
        self.cost = float(value_of(cost))
        values = value_of(defects)
        self.max_defect = float(np.max(np.abs(values))) if values.size else 0.0
        return self.combine(cost, defects)

    def __call__(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        return grad(self._phi, z)


@dataclass
class InnerSolver:
    """Which unconstrained method runs the inner minimizations, and its budget."""

    method: str = 'lbfgs'
    lbfgs: LbfgsState = field(default_factory=LbfgsState)
    adam: AdamState = field(default_factory=AdamState)
    iterations: int = 2000

    def __post_init__(self) -> None:
        if self.method not in ('lbfgs', 'adam', 'nadam'):
            raise InvalidInput(f'unknown inner optimizer {self.method!r}')

    def minimize(self, fun: ValueAndGrad, z0: np.ndarray, *, callback: Optional[Callback] = None) -> OptimizeResult:
        if self.method == 'lbfgs':
            return lbfgs_minimize(fun, z0, self.lbfgs, callback=callback)
        state = dataclasses.replace(self.adam, nesterov=self.method == 'nadam', m=None, v=None, step=0)
        return adam_minimize(fun, z0, state, self.iterations, callback=callback)


def minimize(
    fun: ValueAndGrad,
    z0: np.ndarray,
    inner: InnerSolver,
    *,
    callback: Optional[Callback] = None,
) -> OptimizeResult:
    return inner.minimize(fun, z0, callback=callback)


# augmented Lagrangian


@dataclass
class AugLagState:
    """Multiplier estimate, penalty weight and outer-loop bookkeeping.

    The defaults start from ``v = 0, rho = 0``: the first inner solve
    minimizes the bare cost, after which ``rho`` jumps to ``rho_init``.
    """

    v: Optional[np.ndarray] = None
    rho: float = 0.0
    k: int = 0
    tol: float = 1e-3
    prev_norm: float = math.inf
    gamma: float = 10.0
    decrease: float = 0.25
    rho_init: float = 1.0
    max_outer: int = 30


@dataclass
class OuterRecord:
    outer: int
    cost: float
    max_defect: float
    rho: float
    inner_status: str
    inner_iterations: int


@dataclass
class SolveReport:
    converged: bool
    records: list[OuterRecord] = field(default_factory=list)
    state: Optional[AugLagState] = None

    @property
    def status(self) -> str:
        return 'converged' if self.converged else 'not converged'

    @property
    def max_defect(self) -> float:
        return self.records[-1].max_defect if self.records else math.nan

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([dataclasses.asdict(r) for r in self.records])


def _plain(program: Program, z: np.ndarray) -> tuple[float, np.ndarray]:
    cost, defects = program(z)
    return float(value_of(cost)), np.asarray(value_of(defects), dtype=float).ravel()


def auglag_solve(
    program: Program,
    z0: np.ndarray,
    inner: Optional[InnerSolver] = None,
    state: Optional[AugLagState] = None,
    *,
    training_log: Optional[TrainingLog] = None,
) -> tuple[np.ndarray, SolveReport]:
    """The method of multipliers.

    Each outer iteration minimizes :func:`auglag_objective` with the inner
    solver. It stops once ``max|h| <= tol``; otherwise ``v += 2 rho h`` and
    ``rho`` grows by ``gamma`` whenever ``max|h|`` failed to shrink by the
    ``decrease`` ratio. Running out of outer iterations is reported, not raised.
    """
    inner = inner or InnerSolver()
    state = dataclasses.replace(state) if state is not None else AugLagState()
    z = np.array(z0, dtype=float)

    cost, defects = _plain(program, z)
    if not (math.isfinite(cost) and np.all(np.isfinite(defects))):
        raise OptimizerError('cost or defects are not finite at the starting point')
    if state.v is None:
        state.v = np.zeros_like(defects)

    report = SolveReport(converged=False, state=state)
    while state.k < state.max_outer:
        outer = state.k + 1
        v, rho = state.v.copy(), state.rho
        traced = _TracedObjective(program, lambda c, h: auglag_objective(c, h, v, rho))

        def callback(inner_k: int, x: np.ndarray, value: float, gradient: np.ndarray) -> None:
            if training_log is not None:
                training_log.record(outer, inner_k, traced.cost, traced.max_defect, rho, float(np.linalg.norm(gradient)))

        inner.lbfgs.reset()
        result = inner.minimize(traced, z, callback=callback)
        z = result.x
        cost, defects = _plain(program, z)
        norm = float(np.max(np.abs(defects), initial=0.0))
        report.records.append(OuterRecord(outer, cost, norm, rho, str(result.status), result.iterations))
        log.info(
            'outer iteration %d: cost %.6g, max defect %.3e, rho %.3g (%s after %d inner iterations)',
            outer,
            cost,
            norm,
            rho,
            result.status,
            result.iterations,
        )

        state.k = outer
        if norm <= state.tol:
            report.converged = True
            break

        state.v = state.v + 2.0 * rho * defects
        if rho == 0.0:
            state.rho = state.rho_init
        elif norm > state.decrease * state.prev_norm:
            state.rho = rho * state.gamma
        state.prev_norm = norm

    if not report.converged:
        log.warning(
            'augmented Lagrangian stopped after %d outer iterations with max defect %.3e', state.k, report.max_defect
        )
    return z, report


def penalty_solve(
    program: Program,
    z0: np.ndarray,
    kind: str,
    rho: float,
    inner: Optional[InnerSolver] = None,
    *,
    tol: float = 1e-3,
    training_log: Optional[TrainingLog] = None,
) -> tuple[np.ndarray, SolveReport]:
    """One inner minimization of :func:`penalty_objective` at a fixed ``rho``."""
    if kind not in PENALTY_KINDS:
        raise InvalidInput(f'unknown penalty kind {kind!r}')

    inner = inner or InnerSolver()
    traced = _TracedObjective(program, lambda c, h: penalty_objective(c, h, rho, kind))

    def callback(inner_k: int, x: np.ndarray, value: float, gradient: np.ndarray) -> None:
        if training_log is not None:
            training_log.record(1, inner_k, traced.cost, traced.max_defect, rho, float(np.linalg.norm(gradient)))

    inner.lbfgs.reset()
    result = inner.minimize(traced, np.array(z0, dtype=float), callback=callback)
    cost, defects = _plain(program, result.x)
    norm = float(np.max(np.abs(defects), initial=0.0))
    report = SolveReport(converged=norm <= tol)
    report.records.append(OuterRecord(1, cost, norm, rho, str(result.status), result.iterations))
    log.info('penalty (%s, rho=%.3g) solve: cost %.6g, max defect %.3e, %s', kind, rho, cost, norm, result.status)
    return result.x, report
