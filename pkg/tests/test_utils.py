from __future__ import annotations

import json
import math

import numpy as np
import pandas as pd
import pytest

from nodeshoot.errors import DatasetFormatError
from nodeshoot.utils import cache
from nodeshoot.utils.export import read_series, write_frame, write_json
from nodeshoot.utils.formats import TabularData, format_number, human_join, plural


@pytest.mark.parametrize(
    'count, spec, expected',
    [
        (1, 'interval', '1 interval'),
        (3, 'interval', '3 intervals'),
        (0, 'point', '0 points'),
        (2, 'entry|entries', '2 entries'),
        (1, 'entry|entries!', 'entry'),
        (5, 'entry|entries!', 'entries'),
    ],
)
def test_plural(count, spec, expected):
    assert format(plural(count), spec) == expected


@pytest.mark.parametrize(
    'items, expected',
    [
        ([], ''),
        (['a'], 'a'),
        (['a', 'b'], 'a and b'),
        (['a', 'b', 'c'], 'a, b and c'),
    ],
)
def test_human_join(items, expected):
    assert human_join(items) == expected


def test_format_number():
    assert format_number(0.1234567891) == '0.123457'
    assert format_number(3) == '3'
    assert format_number(np.float64(2.5)) == '2.5'
    assert format_number(math.nan) == '-'
    assert format_number(True) == 'True'
    assert format_number(None) == 'None'
    assert format_number('lbfgs') == 'lbfgs'


def test_table_layout():
    table = TabularData()
    table.set_columns(['tau_d', 'rmse'])
    table.add_rows([[79, 0.51], [90, 0.47]])
    table.highlight(1)
    lines = table.render().splitlines()

    assert len(lines) == 6
    assert lines[0] == lines[2] == lines[-1]
    assert lines[0].startswith('+---+')
    assert 'tau_d' in lines[1] and 'rmse' in lines[1]
    assert lines[3].startswith('|   |')
    assert lines[4].startswith('| * |')
    # numeric cells are right aligned
    assert lines[3].endswith(' 0.51 |')
    assert len({len(line) for line in lines}) == 1


def test_table_text_columns_are_centred():
    table = TabularData()
    table.set_columns(['split', 'rmse'])
    table.add_row(['validation', 0.2])
    row = table.render().splitlines()[3]
    assert '| validation |' in row


def test_table_rejects_ragged_rows():
    table = TabularData()
    table.set_columns(['split', 'rmse'])
    with pytest.raises(ValueError):
        table.add_row(['train'])


def test_cache_memoizes_on_exact_arguments():
    calls = []

    @cache.cache(maxsize=2)
    def square(x):
        calls.append(x)
        return x * x

    assert square(3.0) == 9.0
    assert square(3.0) == 9.0
    assert calls == [3.0]

    # 0.1 + 0.2 is not 0.3, so it gets its own entry
    square(0.1 + 0.2)
    square(0.3)
    assert len(calls) == 3

    assert square.invalidate(0.3)
    assert not square.invalidate(0.3)
    assert square.get_key(1.0) != square.get_key(1)


def test_cache_evicts_least_recently_used():
    calls = []

    @cache.cache(maxsize=2)
    def ident(x):
        calls.append(x)
        return x

    for x in (1, 2, 3, 1):
        ident(x)
    assert calls == [1, 2, 3, 1]
    ident(1)
    assert ident.get_stats() == (1, 4)


def test_raw_cache_is_unbounded():
    @cache.cache(strategy=cache.Strategy.raw)
    def ident(x):
        return x

    for x in range(300):
        ident(x)
    ident(0)
    assert len(ident.cache) == 300
    assert ident.get_stats() == (1, 300)


def test_write_frame_is_exact(tmp_path):
    values = np.array([0.1, 1.0 / 3.0, np.pi * 1e-7])
    path = str(tmp_path / 'values.csv')
    write_frame(pd.DataFrame({'value': values}), path)
    np.testing.assert_array_equal(pd.read_csv(path)['value'].to_numpy(), values)
    assert [p.name for p in tmp_path.iterdir()] == ['values.csv']


def test_write_json_converts_numpy(tmp_path):
    path = str(tmp_path / 'summary.json')
    write_json({'sse': np.float64(1.5), 'states': np.arange(3), 'count': np.int64(4)}, path)
    with open(path, encoding='utf-8') as fp:
        assert json.load(fp) == {'sse': 1.5, 'states': [0, 1, 2], 'count': 4}


def test_write_json_rejects_unknown_types(tmp_path):
    with pytest.raises(TypeError):
        write_json({'value': object()}, str(tmp_path / 'bad.json'))
    assert list(tmp_path.iterdir()) == []


def test_read_series_errors(tmp_path):
    with pytest.raises(DatasetFormatError):
        read_series(str(tmp_path / 'absent.csv'))

    empty = tmp_path / 'empty.csv'
    empty.write_text('', encoding='utf-8')
    with pytest.raises(DatasetFormatError):
        read_series(str(empty))

    no_states = tmp_path / 'no_states.csv'
    no_states.write_text('t,x\n0,1\n1,2\n', encoding='utf-8')
    with pytest.raises(DatasetFormatError, match='state_'):
        read_series(str(no_states))

    unordered = tmp_path / 'unordered.csv'
    unordered.write_text('t,state_0\n1,1\n0,2\n', encoding='utf-8')
    with pytest.raises(DatasetFormatError):
        read_series(str(unordered))
