"""Memoization for pure helpers whose arguments are plain numbers and tuples.

The integrators ask for the same step sequence once per interval per objective
evaluation, so keeping the last few hundred around saves rebuilding them in a
Python loop.
"""

from __future__ import annotations

import enum
from functools import update_wrapper
from typing import Any, Callable, Generic, Hashable, MutableMapping, TypeVar

from lru import LRU

R = TypeVar('R')


class Strategy(enum.Enum):
    lru = 1
    raw = 2


def _freeze(value: Any) -> Hashable:
    # the type tag keeps 1 and 1.0 apart; they hash and compare equal otherwise
    if isinstance(value, (list, tuple)):
        return (type(value).__name__, tuple(_freeze(v) for v in value))
    return (type(value).__name__, value)


class Memo(Generic[R]):
    """A memoized callable.

    Attributes
    -----------
    cache: MutableMapping
        The storage, an :class:`lru.LRU` or a plain dict.
    hits: int
        Calls answered from storage.
    misses: int
        Calls that ran the wrapped function.
    """

    def __init__(self, func: Callable[..., R], maxsize: int, strategy: Strategy) -> None:
        self.func = func
        self.cache: MutableMapping[Hashable, R] = LRU(maxsize) if strategy is Strategy.lru else {}
        self.hits: int = 0
        self.misses: int = 0
        update_wrapper(self, func)

    def __repr__(self) -> str:
        return f'<Memo func={self.func.__qualname__} size={len(self.cache)} hits={self.hits} misses={self.misses}>'

    def get_key(self, *args: Any) -> Hashable:
        return tuple(_freeze(a) for a in args)

    def __call__(self, *args: Any) -> R:
        key = self.get_key(*args)
        if key in self.cache:
            self.hits += 1
            return self.cache[key]

        self.misses += 1
        value = self.func(*args)
        self.cache[key] = value
        return value

    def invalidate(self, *args: Any) -> bool:
        try:
            del self.cache[self.get_key(*args)]
        except KeyError:
            return False
        return True

    def get_stats(self) -> tuple[int, int]:
        return self.hits, self.misses


def cache(maxsize: int = 128, strategy: Strategy = Strategy.lru) -> Callable[[Callable[..., R]], Memo[R]]:
    """Memoizes a pure function on its positional arguments.

    Two calls share an entry only when their arguments are equal and of the same
    type, so floats must be bit-identical. Cached values are shared between
    callers and must not be mutated.
    """

    def decorator(func: Callable[..., R]) -> Memo[R]:
        return Memo(func, maxsize, strategy)

    return decorator
