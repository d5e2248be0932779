from __future__ import annotations

import math
import numbers
from typing import Any, Iterable, Optional, Sequence


class plural:
    """Formats a count with a noun, ``f'{plural(3):interval}'`` gives ``'3 intervals'``.

    ``singular|plural`` spells out an irregular plural, a trailing ``!`` drops the count.
    """

    __slots__ = ('count',)

    def __init__(self, count: int) -> None:
        self.count: int = count

    def __format__(self, spec: str) -> str:
        bare = spec.endswith('!')
        one, _, many = spec.rstrip('!').partition('|')
        noun = one if abs(self.count) == 1 else (many or f'{one}s')
        return noun if bare else f'{self.count} {noun}'


def human_join(items: Sequence[str], *, final: str = 'and') -> str:
    if len(items) <= 2:
        return f' {final} '.join(items)
    return f'{", ".join(items[:-1])} {final} {items[-1]}'


def format_number(value: Any, spec: str = '.6g') -> str:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        return str(value)
    return '-' if math.isnan(value) else format(value, spec)


def _is_number(value: Any) -> bool:
    return isinstance(value, numbers.Real) and not isinstance(value, bool)


class TabularData:
    """A plain-text table for console summaries.

    Columns holding only numbers are right aligned, everything else is centred.
    One row can carry a ``*`` in the leading gutter::

        +---+---------+--------+
        |   |  tau_d  |  rmse  |
        +---+---------+--------+
        |   |      79 |   0.51 |
        | * |      90 |   0.47 |
        +---+---------+--------+
    """

    def __init__(self, *, number_format: str = '.6g') -> None:
        self.number_format: str = number_format
        self.columns: list[str] = []
        self.rows: list[list[str]] = []
        self.numeric: list[bool] = []
        self.marked: Optional[int] = None

    def set_columns(self, columns: Sequence[str]) -> None:
        self.columns = list(columns)
        self.numeric = [True] * len(self.columns)

    def add_row(self, row: Iterable[Any]) -> None:
        values = list(row)
        if len(values) != len(self.columns):
            raise ValueError(f'expected {len(self.columns)} cells, got {len(values)}')

        self.numeric = [flag and _is_number(v) for flag, v in zip(self.numeric, values)]
        self.rows.append([format_number(v, self.number_format) for v in values])

    def add_rows(self, rows: Iterable[Iterable[Any]]) -> None:
        for row in rows:
            self.add_row(row)

    def highlight(self, index: Optional[int]) -> None:
        self.marked = index

    def render(self) -> str:
        widths = [max(map(len, cells)) + 2 for cells in zip(self.columns, *self.rows)]
        rule = '+---+' + '+'.join('-' * width for width in widths) + '+'

        def line(cells: Sequence[str], marker: str = ' ', header: bool = False) -> str:
            padded = (
                cell.rjust(width - 1) + ' ' if numeric and not header else cell.center(width)
                for cell, width, numeric in zip(cells, widths, self.numeric)
            )
            return f'| {marker} |' + '|'.join(padded) + '|'

        body = [line(row, '*' if index == self.marked else ' ') for index, row in enumerate(self.rows)]
        return '\n'.join([rule, line(self.columns, header=True), rule, *body, rule])
