from __future__ import annotations

import asyncio
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import mmh3
import numpy as np
import pandas as pd
import psutil

from nodeshoot.errors import CheckpointError, ConfigError, InvalidInput, NodeShootError
from nodeshoot.network import MlpParams, load_checkpoint, save_checkpoint
from nodeshoot.ode import StepPlan
from nodeshoot.optim import AdamState, AugLagState, InnerSolver, LbfgsState, TrainingLog, auglag_solve, penalty_solve
from nodeshoot.problems import Problem, Split, build_problem
from nodeshoot.problems.spiral import SpiralSpec, gen_spiral
from nodeshoot.shooting import (
    ShootingDecision,
    ShootingGrid,
    ShootingProblem,
    embed_observation,
    init_decision,
    make_grid,
    rmse,
    simulate,
    sse,
)
from nodeshoot.utils.config import ExperimentConfig, worker_count
from nodeshoot.utils.export import write_frame, write_json
from nodeshoot.utils.formats import TabularData, human_join, plural

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_NOT_CONVERGED = 2

CHECKPOINT_FILE = 'checkpoint.json'
SUMMARY_FILE = 'summary.json'
CONFIG_ECHO_FILE = 'config.json'


@dataclass
class TrainReport:
    summary: dict[str, Any]
    converged: bool
    out: Path

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.converged else EXIT_NOT_CONVERGED


@dataclass
class EvalReport:
    metrics: dict[str, dict[str, float]]
    objective: dict[str, float]
    files: list[Path] = field(default_factory=list)

    def table(self) -> TabularData:
        table = TabularData()
        table.set_columns(['split', 'points', 'sse', 'rmse'])
        for name, values in self.metrics.items():
            table.add_row([name, int(values['points']), values['sse'], values['rmse']])
        return table


@dataclass
class SweepReport:
    frame: pd.DataFrame
    best: Optional[int]
    exit_code: int

    def table(self) -> TabularData:
        table = TabularData(number_format='.4g')
        table.set_columns(list(self.frame.columns))
        table.add_rows(self.frame.itertuples(index=False))
        table.highlight(self.best)
        return table


def inner_solver(config: ExperimentConfig) -> InnerSolver:
    return InnerSolver(
        method=config.get('solver.inner'),
        lbfgs=LbfgsState(
            memory=int(config.get('solver.memory')),
            max_iter=int(config.get('solver.inner_iterations')),
            max_eval=int(config.get('solver.max_eval')),
            gtol=float(config.get('solver.gtol')),
        ),
        adam=AdamState(lr=float(config.get('solver.learning_rate'))),
        iterations=int(config.get('solver.iterations')),
    )


def auglag_state(config: ExperimentConfig) -> AugLagState:
    return AugLagState(
        tol=float(config.get('solver.tolerance')),
        gamma=float(config.get('solver.gamma')),
        decrease=float(config.get('solver.decrease')),
        rho_init=float(config.get('solver.rho_init')),
        max_outer=int(config.get('solver.max_outer')),
    )


class Trainer:
    """Resolves a configuration into a problem and runs the pipeline over it.

    Every artifact of a run lands in ``out``: the config echo, the
    checkpoint, the training log, the stitched trajectory, the defects and
    the summary.
    """

    def __init__(self, config: ExperimentConfig, *, out: Optional[str] = None, workers: Optional[int] = None) -> None:
        self.config: ExperimentConfig = config
        self.out: Path = Path(out if out is not None else config.get('out'))
        self.workers: int = workers if workers is not None else worker_count(config)
        self.process = psutil.Process()
        self._problem: Optional[Problem] = None

    def __repr__(self) -> str:
        return f'<Trainer problem={self.config.problem!r} out={str(self.out)!r} workers={self.workers}>'

    @property
    def problem(self) -> Problem:
        if self._problem is None:
            self._problem = build_problem(self.config)
        return self._problem

    @property
    def memory_usage(self) -> float:
        return self.process.memory_full_info().uss / 1024**2

    def prepare_output(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.config.dump(self.out / CONFIG_ECHO_FILE)

    # data generation

    def gen_spiral(self) -> Path:
        spec = SpiralSpec.from_config(self.config)
        series = gen_spiral(spec)
        self.prepare_output()

        path = self.out / 'spiral.csv'
        write_frame(series.to_frame(), str(path))
        sidecar = {
            'seed': spec.seed,
            'noise': spec.noise,
            'x0': list(spec.x0),
            'span': list(spec.span),
            'interval': spec.interval,
            'rtol': spec.rtol,
            'atol': spec.atol,
            'samples': len(series),
        }
        write_json(sidecar, str(path.with_suffix('.json')))
        log.info('Wrote %s to %s', f'{plural(len(series)):sample}', path)
        return path

    # training

    def shooting_problem(self, grid: ShootingGrid, plan: StepPlan) -> ShootingProblem:
        problem = self.problem
        return ShootingProblem(
            problem.data,
            grid,
            problem.field_builder,
            problem.template,
            reg=problem.reg,
            plan=plan,
            n_x=problem.n_x,
            observed=problem.observed,
            pinned_initial=problem.pinned_initial,
            workers=self.workers,
        )

    def train(self) -> TrainReport:
        config = self.config
        problem = self.problem
        started = time.perf_counter()

        method = config.get('solver.method')
        n_intervals = 1 if method == 'single' else int(config.get('shooting.intervals'))
        grid = make_grid(problem.data.span, n_intervals, problem.data.times, snap=bool(config.get('shooting.snap')))
        plan = StepPlan(float(config.get('solver.step')))
        shooting = self.shooting_problem(grid, plan)

        decision = init_decision(
            grid,
            problem.data,
            config.get('shooting.init'),
            problem.template,
            n_x=problem.n_x,
            observed=problem.observed,
            fallback=float(config.get('shooting.fallback')),
        )
        z0 = shooting.pack(decision)
        log.info(
            'Training %s with %s over %s (%d decision variables)',
            problem.name,
            f'{method} shooting',
            f'{plural(n_intervals):interval}',
            shooting.size,
        )

        training_log = TrainingLog(log_every=int(config.get('solver.log_every')))
        inner = inner_solver(config)
        constraint, kind = config.constraint
        if constraint == 'auglag':
            z, report = auglag_solve(shooting.program, z0, inner, auglag_state(config), training_log=training_log)
        else:
            rho = float(config.get('solver.penalty_rho'))
            z, report = penalty_solve(
                shooting.program,
                z0,
                kind or 'quadratic',
                rho,
                inner,
                tol=float(config.get('solver.tolerance')),
                training_log=training_log,
            )

        final = shooting.evaluate(z)
        fitted = shooting.decision(z)
        elapsed = time.perf_counter() - started

        self.prepare_output()
        extras = {
            'problem': problem.name,
            'seed': config.get('seed'),
            'method': method,
            'boundaries': grid.boundaries.tolist(),
            'step': plan.h,
            'states': np.asarray(fitted.states).tolist(),
            'cost': float(final.cost),
            'sse': float(final.sse),
        }
        save_checkpoint(str(self.out / CHECKPOINT_FILE), fitted.theta, extras=extras)
        write_frame(training_log.to_frame(), str(self.out / 'training_log.csv'))
        write_frame(report.to_frame(), str(self.out / 'outer_iterations.csv'))
        write_frame(final.trajectory_frame(), str(self.out / 'trajectory.csv'))
        write_frame(final.defects.to_frame(), str(self.out / 'defects.csv'))

        summary = {
            'problem': problem.name,
            'method': method,
            'constraint': config.get('solver.constraint'),
            'inner': inner.method,
            'intervals': n_intervals,
            'parameters': problem.template.n_params,
            'cost': float(final.cost),
            'sse': float(final.sse),
            'regularization': float(final.regularization),
            'max_defect': final.defects.max_abs(),
            'converged': report.converged,
            'outer_iterations': len(report.records),
            'inner_iterations': sum(r.inner_iterations for r in report.records),
            'wall_time': elapsed,
            'memory_mib': self.memory_usage,
            'config': config.all(),
        }
        for key, value in problem.extras.items():
            summary.setdefault(key, value)
        write_json(summary, str(self.out / SUMMARY_FILE))

        if report.converged:
            log.info(
                'Training finished in %.1fs: cost %.6g, max defect %.3e', elapsed, summary['cost'], summary['max_defect']
            )
        else:
            log.warning(
                'Training did not converge: max defect %.3e after %d outer iterations',
                summary['max_defect'],
                len(report.records),
            )
        return TrainReport(summary, report.converged, self.out)

    # evaluation

    def load(self, checkpoint: Optional[str] = None) -> tuple[MlpParams, dict[str, Any]]:
        path = checkpoint if checkpoint is not None else str(self.out / CHECKPOINT_FILE)
        theta, extras = load_checkpoint(path)
        template = self.problem.template
        if theta.layer_sizes != template.layer_sizes or theta.use_bias != template.use_bias:
            raise CheckpointError(
                f'checkpoint network {theta.layer_sizes} (bias={theta.use_bias}) does not match the configured '
                f'{template.layer_sizes} (bias={template.use_bias})'
            )
        for key in ('states', 'boundaries', 'step'):
            if key not in extras:
                raise CheckpointError(f'checkpoint {path} has no {key!r} entry')
        return theta, extras

    def recompute_objective(self, theta: MlpParams, extras: dict[str, Any]) -> dict[str, float]:
        """The shooting objective at the stored solution, on the training step plan."""
        grid = ShootingGrid(extras['boundaries'])
        shooting = self.shooting_problem(grid, StepPlan(float(extras['step'])))
        states = np.asarray(extras['states'], dtype=float).reshape(grid.n_intervals, self.problem.n_x)
        result = shooting.evaluate(shooting.pack(ShootingDecision(theta, states)))
        return {'cost': float(result.cost), 'sse': float(result.sse), 'max_defect': result.defects.max_abs()}

    def _initial_state(self, split: Split, extras: dict[str, Any]) -> np.ndarray:
        problem = self.problem
        if split.initial == 'observed':
            fallback = float(self.config.get('shooting.fallback'))
            return embed_observation(split.series.values[0], problem.n_x, problem.observed, fallback)
        return np.asarray(extras['states'][0], dtype=float)

    def _simulate(self, split: Split, theta: MlpParams, x0: np.ndarray, times: np.ndarray, step: float) -> np.ndarray:
        field = split.field_builder(theta)
        if self.config.get('eval.single_ivp'):
            trajectory = simulate(field, x0, times, plan=StepPlan(step))
        else:
            rtol, atol = float(self.config.get('eval.rtol')), float(self.config.get('eval.atol'))
            trajectory = simulate(field, x0, times, rtol=rtol, atol=atol)
        return trajectory.values()

    def _frame(self, times: np.ndarray, states: np.ndarray) -> pd.DataFrame:
        frame = pd.DataFrame(states, columns=[f'state_{i}' for i in range(states.shape[1])])
        frame.insert(0, 't', times)
        return frame

    def evaluate(self, checkpoint: Optional[str] = None, *, span: Optional[tuple[float, float]] = None) -> EvalReport:
        """Integrates the trained model as one initial value problem per split.

        With ``span`` the first split is instead integrated over that span,
        which must start where the training data starts.
        """
        theta, extras = self.load(checkpoint)
        problem = self.problem
        step = float(extras['step'])
        self.out.mkdir(parents=True, exist_ok=True)

        report = EvalReport(metrics={}, objective=self.recompute_objective(theta, extras))
        for index, split in enumerate(problem.splits):
            x0 = self._initial_state(split, extras)
            series = split.series
            if span is not None and index == 0:
                t0, tf = float(span[0]), float(span[1])
                if abs(t0 - split.start) > 1e-9 * max(1.0, abs(t0)):
                    raise InvalidInput(f'evaluation span must start at {split.start}, got {t0}')
                spacing = float(np.median(np.diff(series.times))) if len(series) > 1 else (tf - t0)
                grid_times = t0 + spacing * np.arange(int(math.floor((tf - t0) / spacing + 1e-9)) + 1)
                inside = series.times[(series.times >= t0) & (series.times <= tf)]
                times = np.unique(np.round(np.concatenate([grid_times, inside, [tf]]), 12))
                name = 'span'
            else:
                times = split.simulation_times()
                name = split.name

            states = self._simulate(split, theta, x0, times, step)
            path = self.out / f'eval_{name}.csv'
            write_frame(self._frame(times, states), str(path))
            report.files.append(path)

            positions = np.searchsorted(times, series.times)
            present = (positions < len(times)) & (times[np.minimum(positions, len(times) - 1)] == series.times)
            if not np.any(present):
                continue

            predicted = states[positions[present]][:, list(problem.observed)]
            observed = series.values[present]
            metrics = {
                'points': float(np.count_nonzero(present)),
                'sse': float(sse(predicted, observed)),
                'rmse': rmse(predicted, observed),
            }
            if name == 'span':
                metrics['max_norm'] = float(np.max(np.abs(states)))
                metrics['final_norm'] = float(np.linalg.norm(states[-1]))
            report.metrics[name] = metrics

        write_json({'splits': report.metrics, 'objective': report.objective}, str(self.out / 'eval.json'))
        log.info(
            'Evaluated %s: %s',
            problem.name,
            human_join([f'{name} rmse {values["rmse"]:.4g}' for name, values in report.metrics.items()]),
        )
        return report

    # hyperparameter sweeps

    async def sweep(self, grid_spec: dict[str, Any]) -> SweepReport:
        points = expand_grid(grid_spec, seed=int(self.config.get('seed')))
        self.prepare_output()
        log.info('Sweeping %s over %s', f'{plural(len(points)):point}', human_join(sorted(points[0])))

        loop = asyncio.get_running_loop()
        jobs = []
        workers = min(self.workers, len(points))
        executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            for point in points:
                config = self.config.copy()
                for key, value in point.items():
                    config.override(key, value)
                out = self.out / point_name(point)
                jobs.append(loop.run_in_executor(executor, run_point, config.all(), str(out)))
            results = await asyncio.gather(*jobs)
        finally:
            if executor is not None:
                executor.shutdown()

        rows = []
        for point, result in zip(points, results):
            rows.append({'point': point_name(point), **point, **result})
        frame = pd.DataFrame(rows)
        write_frame(frame, str(self.out / 'sweep.csv'))

        score = 'rmse_validation' if 'rmse_validation' in frame.columns else 'rmse_train'
        best: Optional[int] = None
        if score in frame.columns and frame[score].notna().any():
            best = int(frame[score].astype(float).idxmin())

        failed = int((frame['status'] == 'failed').sum())
        if failed == len(frame):
            code = EXIT_FAILED
        elif failed or not frame['converged'].fillna(False).astype(bool).all():
            code = EXIT_NOT_CONVERGED
        else:
            code = EXIT_OK
        return SweepReport(frame, best, code)


def point_name(point: dict[str, Any]) -> str:
    """A stable directory name for one sweep point."""
    key = json.dumps(point, sort_keys=True)
    return f'{mmh3.hash(key) & 0xFFFFFFFF:08x}'


def expand_grid(spec: dict[str, Any], *, seed: int = 0) -> list[dict[str, Any]]:
    """Cartesian ``{key: [values]}`` or seeded random ``{"samples": n, "ranges": {key: [lo, hi]}}``."""
    if not isinstance(spec, dict) or not spec:
        raise ConfigError('the sweep grid is empty')

    if 'samples' in spec or 'ranges' in spec:
        samples = spec.get('samples')
        ranges = spec.get('ranges') or {}
        if not isinstance(samples, int) or samples < 1 or not ranges:
            raise ConfigError('a random sweep needs a positive "samples" count and at least one range')
        rng = np.random.default_rng(seed)
        points = []
        for _ in range(samples):
            point = {}
            for key in sorted(ranges):
                low, high = ranges[key]
                point[key] = float(rng.uniform(low, high))
            points.append(point)
        return points

    keys = sorted(spec)
    for key in keys:
        if not isinstance(spec[key], list) or not spec[key]:
            raise ConfigError(f'sweep values for {key!r} must be a non-empty list')
    return [dict(zip(keys, values)) for values in itertools.product(*(spec[key] for key in keys))]


def run_point(data: dict[str, Any], out: str) -> dict[str, Any]:
    """Trains and evaluates one sweep point; failures are returned, not raised."""
    try:
        config = ExperimentConfig(data)
        config.validate()
        trainer = Trainer(config, out=out, workers=1)
        report = trainer.train()
        evaluation = trainer.evaluate()
    except (NodeShootError, OSError, ValueError, TypeError, FloatingPointError) as e:
        log.warning('Sweep point %s failed: %s', out, e)
        return {'status': 'failed', 'converged': False, 'error': str(e)}

    result: dict[str, Any] = {
        'status': 'ok',
        'converged': report.converged,
        'cost': report.summary['cost'],
        'max_defect': report.summary['max_defect'],
    }
    for name, values in evaluation.metrics.items():
        result[f'rmse_{name}'] = values['rmse']
    return result
