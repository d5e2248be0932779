from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Callable, Optional

import click

from nodeshoot.errors import ConfigError, NodeShootError
from nodeshoot.utils.config import ExperimentConfig, parse_assignment
from trainer import EXIT_FAILED, EXIT_OK, Trainer


@contextlib.contextmanager
def setup_logging(out: Optional[Path] = None, *, verbose: bool = False):
    log = logging.getLogger()

    try:
        # __enter__
        max_bytes = 32 * 1024 * 1024  # 32 MiB
        log.setLevel(logging.DEBUG if verbose else logging.INFO)
        dt_fmt = '%Y-%m-%d %H:%M:%S'
        fmt = logging.Formatter('[{asctime}] [{levelname:<7}] {name}: {message}', dt_fmt, style='{')

        console = logging.StreamHandler()
        console.setFormatter(fmt)
        log.addHandler(console)

        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            handler = RotatingFileHandler(
                filename=out / 'nodeshoot.log', encoding='utf-8', mode='w', maxBytes=max_bytes, backupCount=5
            )
            handler.setFormatter(fmt)
            log.addHandler(handler)

        yield
    finally:
        # __exit__
        handlers = log.handlers[:]
        for hdlr in handlers:
            hdlr.close()
            log.removeHandler(hdlr)


def common_options(func: Callable[..., Any]) -> Callable[..., Any]:
    options = (
        click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='The JSON configuration file.'),
        click.option('--seed', type=int, default=None, help='Overrides the seed key.'),
        click.option('--out', type=click.Path(file_okay=False), default=None, help='Overrides the output directory.'),
        click.option('--set', 'assignments', multiple=True, metavar='KEY=VALUE', help='Overrides any configuration key.'),
        click.option('-v', '--verbose', is_flag=True, help='Logs at the DEBUG level.'),
    )
    for option in reversed(options):
        func = option(func)
    return func


def resolve_config(config_path: Optional[str], seed: Optional[int], out: Optional[str], assignments: tuple[str, ...]):
    overrides = [parse_assignment(text) for text in assignments]
    if seed is not None:
        overrides.append(('seed', seed))
    if out is not None:
        overrides.append(('out', out))
    return ExperimentConfig.load(config_path, overrides)


def fail(error: BaseException) -> None:
    click.secho(f'error: {error}', fg='red', err=True)


def run(action: Callable[[Trainer], int], config: ExperimentConfig, *, verbose: bool) -> None:
    """Runs ``action`` with logging into the output directory and exits with its code.

    Library errors and I/O errors are hard failures with exit code 1.
    """
    trainer = Trainer(config)
    with setup_logging(trainer.out, verbose=verbose):
        log = logging.getLogger()
        try:
            code = action(trainer)
        except (NodeShootError, OSError) as e:
            log.exception('Command failed.')
            fail(e)
            code = EXIT_FAILED

    sys.exit(code)


def load_or_exit(
    config_path: Optional[str],
    seed: Optional[int],
    out: Optional[str],
    assignments: tuple[str, ...],
    *,
    extra: tuple[tuple[str, Any], ...] = (),
    require_data: bool = True,
) -> ExperimentConfig:
    try:
        config = resolve_config(config_path, seed, out, assignments)
        for key, value in extra:
            config.override(key, value)
        config.validate(require_data=require_data)
    except ConfigError as e:
        fail(e)
        sys.exit(EXIT_FAILED)
    return config


@click.group(options_metavar='[options]')
def main():
    """Fits neural ordinary differential equations by multiple shooting."""


@main.command('gen-spiral')
@common_options
def gen_spiral(config_path, seed, out, assignments, verbose):
    """Writes a sampled, noisy cubic spiral dataset."""
    config = load_or_exit(config_path, seed, out, assignments, require_data=False)

    def action(trainer: Trainer) -> int:
        path = trainer.gen_spiral()
        click.secho(f'Wrote {path}', fg='green')
        return EXIT_OK

    run(action, config, verbose=verbose)


@main.command()
@common_options
def train(config_path, seed, out, assignments, verbose):
    """Trains the configured model and writes its checkpoint and report."""
    config = load_or_exit(config_path, seed, out, assignments)

    def action(trainer: Trainer) -> int:
        report = trainer.train()
        summary = report.summary
        colour = 'green' if report.converged else 'yellow'
        click.secho(
            f'cost {summary["cost"]:.6g}, sse {summary["sse"]:.6g}, max defect {summary["max_defect"]:.3e}, '
            f'{"converged" if report.converged else "not converged"} after {summary["outer_iterations"]} outer iterations',
            fg=colour,
        )
        return report.exit_code

    run(action, config, verbose=verbose)


@main.command('eval')
@common_options
@click.option('--checkpoint', type=click.Path(dir_okay=False), default=None, help='Defaults to the output directory.')
@click.option('--span', type=float, nargs=2, default=None, metavar='T0 T1', help='Integrates over this span instead.')
@click.option('--single-ivp', is_flag=True, help='Uses the fixed-step plan of training instead of the adaptive solver.')
def evaluate(config_path, seed, out, assignments, verbose, checkpoint, span, single_ivp):
    """Integrates a trained model and reports SSE and RMSE per split."""
    extra: list[tuple[str, Any]] = []
    if span:
        extra.append(('eval.span', list(span)))
    if single_ivp:
        extra.append(('eval.single_ivp', True))
    config = load_or_exit(config_path, seed, out, assignments, extra=tuple(extra))

    def action(trainer: Trainer) -> int:
        requested = config.get('eval.span')
        report = trainer.evaluate(checkpoint, span=tuple(requested) if requested else None)
        click.echo(report.table().render())
        click.echo(f'objective at the checkpoint: {json.dumps(report.objective)}')
        return EXIT_OK

    run(action, config, verbose=verbose)


@main.command()
@common_options
@click.option(
    '--grid', 'grid_path', type=click.Path(exists=True, dir_okay=False), required=True, help='The JSON sweep grid.'
)
def sweep(config_path, seed, out, assignments, verbose, grid_path):
    """Trains and evaluates one run per point of a hyperparameter grid."""
    config = load_or_exit(config_path, seed, out, assignments)
    try:
        with open(grid_path, 'r', encoding='utf-8') as fp:
            grid = json.load(fp)
    except json.JSONDecodeError as e:
        fail(e)
        sys.exit(EXIT_FAILED)

    def action(trainer: Trainer) -> int:
        report = asyncio.run(trainer.sweep(grid))
        click.echo(report.table().render())
        return report.exit_code

    run(action, config, verbose=verbose)


if __name__ == '__main__':
    main()
