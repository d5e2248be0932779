from __future__ import annotations

from typing import Optional


class NodeShootError(RuntimeError):
    """Base class of every error raised by the library."""

    pass


class IntegrationError(NodeShootError):
    def __init__(self, time: float, message: Optional[str] = None):
        self.time: float = time
        super().__init__(message or f'integration failed: non-finite state or derivative at t={time!r}')


class IntervalError(NodeShootError):
    def __init__(self, interval: int, original: IntegrationError):
        self.interval: int = interval
        self.original: IntegrationError = original
        super().__init__(f'shooting interval {interval} failed: {original}')


class GradientError(NodeShootError):
    def __init__(self, index: int, op: str):
        self.index: int = index
        self.op: str = op
        super().__init__(f'non-finite partial derivative at tape node {index} ({op})')


class InvalidArchitecture(NodeShootError):
    pass


class InvalidInput(NodeShootError):
    pass


class InvalidGrid(NodeShootError):
    pass


class InitializationError(NodeShootError):
    def __init__(self, time: float, message: Optional[str] = None):
        self.time: float = time
        super().__init__(message or f'no observation available at shooting boundary t={time!r}')


class OptimizerError(NodeShootError):
    pass


class DatasetFormatError(NodeShootError):
    pass


class ConfigError(NodeShootError):
    pass


class CheckpointError(NodeShootError):
    pass
