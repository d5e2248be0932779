from __future__ import annotations

import copy
import json
import os
import uuid
from typing import TYPE_CHECKING, Any, Iterable, Optional, Union

import psutil

from ..errors import ConfigError

if TYPE_CHECKING:
    from typing_extensions import Self

PROBLEM_TAGS = ('spiral', 'tanks', 'custom')
INNER_METHODS = ('lbfgs', 'adam', 'nadam')
INIT_STRATEGIES = ('replicate_x0', 'data_at_boundaries')
PENALTY_KINDS = ('quadratic', 'l1', 'l2', 'linf')
THREADS_ENV = 'NODESHOOT_THREADS'

_MISSING: Any = object()

DEFAULTS: dict[str, Any] = {
    'problem': 'spiral',
    'seed': 0,
    'out': 'runs',
    'workers': None,
    'data': {'path': None},
    'spiral': {
        'x0': [2.0, 0.0],
        'span': [0.0, 6.0],
        'interval': 0.1,
        'noise': 0.2,
        'rtol': 1e-8,
        'atol': 1e-10,
    },
    'tanks': {
        'tau_d': 79.0,
        'tau_i': 164.0,
        'split': 2048.0,
        'period': 4.0,
        'surrogate': False,
        'noise': 0.1,
        'test_initial': 'observed',
    },
    'network': {'hidden': [16], 'use_bias': False},
    'regularization': {'kind': 'spectral_sum', 'weight': 1.0},
    'shooting': {'intervals': 20, 'init': 'replicate_x0', 'pin_initial': False, 'snap': True, 'fallback': 0.0},
    'solver': {
        'method': 'multiple',
        'constraint': 'auglag',
        'penalty_rho': 1.0,
        'inner': 'lbfgs',
        'step': 0.05,
        'inner_iterations': 200,
        'max_eval': 2000,
        'memory': 10,
        'gtol': 1e-6,
        'learning_rate': 1e-3,
        'iterations': 2000,
        'tolerance': 1e-3,
        'max_outer': 30,
        'rho_init': 1.0,
        'gamma': 10.0,
        'decrease': 0.25,
        'log_every': 10,
    },
    'eval': {'rtol': 1e-8, 'atol': 1e-10, 'single_ivp': False, 'span': None},
}

# applied on top of the defaults before the file itself
PROBLEM_DEFAULTS: dict[str, dict[str, Any]] = {
    'spiral': {},
    'tanks': {
        'network': {'hidden': [64]},
        'regularization': {'kind': 'l2', 'weight': 5.96e-2},
        'shooting': {'intervals': 16, 'init': 'data_at_boundaries'},
        'solver': {'step': 1.0},
    },
    'custom': {
        'regularization': {'kind': 'none', 'weight': 0.0},
        'shooting': {'init': 'data_at_boundaries'},
    },
}


def _merge(base: dict[str, Any], overlay: dict[str, Any], prefix: str = '') -> dict[str, Any]:
    result = copy.deepcopy(base)
    for key, value in overlay.items():
        dotted = f'{prefix}{key}'
        if key not in base:
            raise ConfigError(f'unknown configuration key {dotted!r}')
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f'configuration key {dotted!r} must be a mapping')
            result[key] = _merge(base[key], value, f'{dotted}.')
        else:
            result[key] = copy.deepcopy(value)
    return result


def parse_assignment(text: str) -> tuple[str, Any]:
    """Splits ``key=value``; the value is read as JSON and kept as a string if that fails."""
    key, sep, raw = text.partition('=')
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f'expected KEY=VALUE, got {text!r}')
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


class ExperimentConfig:
    """The resolved settings of one run. Internally a nested ``json`` tree.

    Keys are addressed with dots, ``config.get('solver.inner')``. Every key
    must exist in :data:`DEFAULTS`, so a typo in a file or in a ``--set``
    override is an error instead of being silently ignored.
    """

    def __init__(self, data: Optional[dict[str, Any]] = None, *, source: Optional[str] = None):
        data = data or {}
        problem = data.get('problem', DEFAULTS['problem'])
        if problem not in PROBLEM_TAGS:
            raise ConfigError(f'unknown problem {problem!r}, expected one of {", ".join(PROBLEM_TAGS)}')

        base = _merge(DEFAULTS, PROBLEM_DEFAULTS[problem])
        self._db: dict[str, Any] = _merge(base, data)
        self.source: Optional[str] = source

    def __repr__(self) -> str:
        return f'<ExperimentConfig problem={self.problem!r} source={self.source!r}>'

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Iterable[tuple[str, Any]] = ()) -> Self:
        data: dict[str, Any] = {}
        if path is not None:
            try:
                with open(path, 'r', encoding='utf-8') as fp:
                    data = json.load(fp)
            except FileNotFoundError:
                raise ConfigError(f'configuration file {path} does not exist') from None
            except json.JSONDecodeError as e:
                raise ConfigError(f'configuration file {path} is not valid JSON: {e}') from None

            if not isinstance(data, dict):
                raise ConfigError(f'configuration file {path} must contain a JSON object')

        overrides = list(overrides)
        # the problem tag picks the overlay, so it has to be known before merging
        for key, value in overrides:
            if key == 'problem':
                data['problem'] = value

        config = cls(data, source=path)
        for key, value in overrides:
            if key != 'problem':
                config.override(key, value)
        return config

    @property
    def problem(self) -> str:
        return self._db['problem']

    def get(self, key: str, default: Any = _MISSING) -> Any:
        """Retrieves a config entry by dotted key."""
        node: Any = self._db
        for part in key.split('.'):
            if not isinstance(node, dict) or part not in node:
                if default is _MISSING:
                    raise ConfigError(f'unknown configuration key {key!r}')
                return default
            node = node[part]
        return node

    def __getitem__(self, key: str) -> Any:
        return self.get(key)

    def __contains__(self, key: str) -> bool:
        absent = object()
        return self.get(key, absent) is not absent

    def override(self, key: str, value: Any) -> None:
        """Replaces one leaf; the key must already exist."""
        if key == 'problem':
            raise ConfigError('the problem tag cannot be changed after loading')

        *parents, leaf = key.split('.')
        node: Any = self._db
        for part in parents:
            node = node.get(part) if isinstance(node, dict) else None
            if not isinstance(node, dict):
                raise ConfigError(f'unknown configuration key {key!r}')

        if leaf not in node:
            raise ConfigError(f'unknown configuration key {key!r}')
        if isinstance(node[leaf], dict):
            raise ConfigError(f'configuration key {key!r} is a section, not a value')
        node[leaf] = value

    def copy(self) -> Self:
        clone = self.__class__.__new__(self.__class__)
        clone._db = copy.deepcopy(self._db)
        clone.source = self.source
        return clone

    def all(self) -> dict[str, Any]:
        return copy.deepcopy(self._db)

    @property
    def constraint(self) -> tuple[str, Optional[str]]:
        """``('auglag', None)`` or ``('penalty', kind)``."""
        value = str(self.get('solver.constraint'))
        name, _, kind = value.partition(':')
        if name == 'auglag' and not kind:
            return 'auglag', None
        if name == 'penalty':
            kind = kind or 'quadratic'
            if kind in PENALTY_KINDS:
                return 'penalty', kind
        raise ConfigError(f'solver.constraint must be "auglag" or "penalty:<{"|".join(PENALTY_KINDS)}>", got {value!r}')

    def validate(self, *, require_data: bool = True) -> None:
        """Checks the invariants that would otherwise fail deep inside a run."""
        positive_ints = (
            'shooting.intervals',
            'solver.inner_iterations',
            'solver.max_eval',
            'solver.memory',
            'solver.iterations',
            'solver.max_outer',
            'solver.log_every',
        )
        for key in positive_ints:
            value = self.get(key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f'{key} must be a positive integer, got {value!r}')

        positive = (
            'solver.step',
            'solver.gtol',
            'solver.learning_rate',
            'solver.tolerance',
            'solver.rho_init',
            'solver.gamma',
            'eval.rtol',
            'eval.atol',
            'spiral.interval',
            'spiral.rtol',
            'spiral.atol',
            'tanks.period',
        )
        for key in positive:
            value = self.get(key)
            if not isinstance(value, (int, float)) or not value > 0:
                raise ConfigError(f'{key} must be positive, got {value!r}')

        nonnegative = (
            'regularization.weight',
            'solver.penalty_rho',
            'spiral.noise',
            'tanks.noise',
            'tanks.tau_d',
            'tanks.tau_i',
        )
        for key in nonnegative:
            value = self.get(key)
            if not isinstance(value, (int, float)) or not value >= 0:
                raise ConfigError(f'{key} must be nonnegative, got {value!r}')

        decrease = self.get('solver.decrease')
        if not isinstance(decrease, (int, float)) or not 0 < decrease < 1:
            raise ConfigError(f'solver.decrease must lie in (0, 1), got {decrease!r}')

        if self.get('solver.method') not in ('single', 'multiple'):
            raise ConfigError(f'solver.method must be "single" or "multiple", got {self.get("solver.method")!r}')
        if self.get('solver.inner') not in INNER_METHODS:
            raise ConfigError(f'solver.inner must be one of {", ".join(INNER_METHODS)}')
        if self.get('shooting.init') not in INIT_STRATEGIES:
            raise ConfigError(f'shooting.init must be one of {", ".join(INIT_STRATEGIES)}')
        if self.get('regularization.kind') not in ('spectral_sum', 'l2', 'none'):
            raise ConfigError(f'unknown regularization kind {self.get("regularization.kind")!r}')
        if self.get('tanks.test_initial') not in ('observed', 'fitted'):
            raise ConfigError('tanks.test_initial must be "observed" or "fitted"')
        _ = self.constraint

        hidden = self.get('network.hidden')
        if not isinstance(hidden, list) or not all(isinstance(h, int) and h > 0 for h in hidden):
            raise ConfigError(f'network.hidden must be a list of positive integers, got {hidden!r}')

        span = self.get('eval.span')
        if span is not None and (len(span) != 2 or not span[1] > span[0]):
            raise ConfigError(f'eval.span must be an increasing pair, got {span!r}')

        path = self.get('data.path')
        if path is not None and not os.path.exists(path):
            raise ConfigError(f'dataset {path} does not exist')
        if require_data and path is None:
            if self.problem == 'custom' or (self.problem == 'tanks' and not self.get('tanks.surrogate')):
                raise ConfigError(f'problem {self.problem!r} needs data.path')

    def dump(self, path: Union[str, os.PathLike[str]]) -> None:
        path = os.fspath(path)
        directory, name = os.path.split(path)
        temp = os.path.join(directory, f'{uuid.uuid4()}-{name}.tmp')
        with open(temp, 'w', encoding='utf-8') as tmp:
            json.dump(self._db, tmp, ensure_ascii=True, indent=2, sort_keys=True)

        # atomically move the file
        os.replace(temp, path)


def worker_count(config: Optional[ExperimentConfig] = None) -> int:
    """``NODESHOOT_THREADS``, then the ``workers`` key, then the number of physical cores."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f'{THREADS_ENV} must be an integer, got {env!r}') from None
        if value < 1:
            raise ConfigError(f'{THREADS_ENV} must be positive, got {value}')
        return value

    if config is not None and config.get('workers') is not None:
        value = config.get('workers')
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f'workers must be a positive integer, got {value!r}')
        return value

    return psutil.cpu_count(logical=False) or 1
