from __future__ import annotations

import logging
import os

import numpy as np
import pytest

from nodeshoot.shooting import TimeSeries

TANKS_DATA_ENV = 'NODESHOOT_TANKS_DATA'


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption('--runslow', action='store_true', default=False, help='run the slow reproduction tests')


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line('markers', 'slow: long-running reproduction test, needs --runslow')


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption('--runslow'):
        return

    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _quiet_logging():
    logging.getLogger('nodeshoot').setLevel(logging.WARNING)
    yield
    logging.getLogger('nodeshoot').setLevel(logging.NOTSET)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def ramp_series() -> TimeSeries:
    """Two components sampled every 0.5 s on [0, 4]."""
    times = np.arange(9) * 0.5
    return TimeSeries(times, np.column_stack([np.cos(times), np.sin(times)]))


@pytest.fixture
def tanks_data_path() -> str:
    path = os.environ.get(TANKS_DATA_ENV, os.path.join('data', 'dataBenchmark.csv'))
    if not os.path.exists(path):
        pytest.skip(f'cascaded tanks benchmark not found at {path}')
    return path
