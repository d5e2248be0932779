"""Reverse-mode differentiation on a recorded tape of array operations.

Programs are written against plain numpy arrays and the helpers in this
module. Run with ndarrays they evaluate plainly; run with a :class:`Var`
they record every primitive onto a :class:`Tape`, which is then swept
backwards to accumulate adjoints.
"""

from __future__ import annotations

import logging
from typing import Any, Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import GradientError, InvalidInput

log = logging.getLogger(__name__)

SQRT_FLOOR = 1e-12

Forward = Callable[..., np.ndarray]
Backward = Callable[..., Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ('op', 'parents', 'forward', 'backward', 'value', 'requires_grad')

    def __init__(
        self,
        op: str,
        parents: tuple[int, ...],
        forward: Optional[Forward],
        backward: Optional[Backward],
        value: np.ndarray,
        requires_grad: bool,
    ) -> None:
        self.op: str = op
        self.parents: tuple[int, ...] = parents
        self.forward: Optional[Forward] = forward
        self.backward: Optional[Backward] = backward
        self.value: np.ndarray = value
        self.requires_grad: bool = requires_grad

    def __repr__(self) -> str:
        return f'<Node op={self.op!r} parents={self.parents} shape={self.value.shape}>'


class Tape:
    """An append-only record of primal operations.

    Nodes are appended in evaluation order, so the index order is a
    topological order and the backward sweep simply walks it in reverse.

    Attributes
    -----------
    nodes: list[Node]
        The recorded operations, leaves included.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __repr__(self) -> str:
        return f'<Tape nodes={len(self.nodes)}>'

    def _append(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, node.value)

    def leaf(self, value: Any) -> Var:
        """Registers an independent variable."""
        return self._append(Node('input', (), None, None, np.array(value, dtype=float), True))

    def constant(self, value: Any) -> Var:
        return self._append(Node('const', (), None, None, np.asarray(value, dtype=float), False))

    def record(self, op: str, parents: Sequence[Var], forward: Forward, backward: Backward) -> Var:
        value = forward(*(p.value for p in parents))
        requires_grad = any(self.nodes[p.index].requires_grad for p in parents)
        node = Node(op, tuple(p.index for p in parents), forward, backward, value, requires_grad)
        return self._append(node)

    def replay(self) -> list[np.ndarray]:
        """Recomputes every node value from the leaves and returns them in node order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.forward is None:
                values.append(node.value)
            else:
                values.append(node.forward(*(values[p] for p in node.parents)))
        return values

    def backward(self, output: Var) -> list[Optional[np.ndarray]]:
        """Accumulates d(output)/d(node) for every node the output depends on."""
        if output.tape is not self:
            raise InvalidInput('output variable was recorded on a different tape')

        nodes = self.nodes
        adjoints: list[Optional[np.ndarray]] = [None] * len(nodes)
        adjoints[output.index] = np.ones_like(output.value)
        for index in range(output.index, -1, -1):
            adjoint = adjoints[index]
            if adjoint is None:
                continue

            node = nodes[index]
            if not np.all(np.isfinite(adjoint)):
                raise GradientError(index, node.op)

            if node.backward is None or not node.requires_grad:
                continue

            partials = node.backward(adjoint, node.value, *(nodes[p].value for p in node.parents))
            for parent, partial in zip(node.parents, partials):
                if partial is None or not nodes[parent].requires_grad:
                    continue
                current = adjoints[parent]
                adjoints[parent] = partial if current is None else current + partial

        return adjoints


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A value recorded on a tape.

    Arithmetic with ndarrays or Python numbers records the matching
    primitive. Numpy defers to the reflected operators because
    ``__array_ufunc__`` is disabled.
    """

    __slots__ = ('tape', 'index', 'value')
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int, value: np.ndarray) -> None:
        self.tape: Tape = tape
        self.index: int = index
        self.value: np.ndarray = value

    def __repr__(self) -> str:
        return f'<Var index={self.index} shape={self.value.shape}>'

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __len__(self) -> int:
        return len(self.value)

    def _lift(self, other: Any) -> Var:
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise InvalidInput('cannot combine variables from different tapes')
            return other
        return self.tape.constant(other)

    # arithmetic

    def __add__(self, other: Any) -> Var:
        if isinstance(other, (int, float)):
            c = float(other)
            return self.tape.record('shift', (self,), lambda a: a + c, lambda g, out, a: (g,))
        return _add(self, self._lift(other))

    def __radd__(self, other: Any) -> Var:
        return self.__add__(other)

    def __sub__(self, other: Any) -> Var:
        if isinstance(other, (int, float)):
            return self.__add__(-float(other))
        return _sub(self, self._lift(other))

    def __rsub__(self, other: Any) -> Var:
        return _sub(self._lift(other), self)

    def __mul__(self, other: Any) -> Var:
        if isinstance(other, (int, float)):
            c = float(other)
            return self.tape.record('scale', (self,), lambda a: a * c, lambda g, out, a: (g * c,))
        return _mul(self, self._lift(other))

    def __rmul__(self, other: Any) -> Var:
        return self.__mul__(other)

    def __truediv__(self, other: Any) -> Var:
        if isinstance(other, (int, float)):
            return self.__mul__(1.0 / float(other))
        return _div(self, self._lift(other))

    def __rtruediv__(self, other: Any) -> Var:
        return _div(self._lift(other), self)

    def __neg__(self) -> Var:
        return self.__mul__(-1.0)

    def __pow__(self, exponent: float) -> Var:
        if isinstance(exponent, Var):
            raise InvalidInput('only constant exponents are supported')
        p = float(exponent)
        return self.tape.record('power', (self,), lambda a: a**p, lambda g, out, a: (g * p * a ** (p - 1.0),))

    def __matmul__(self, other: Any) -> Var:
        return _matmul(self, self._lift(other))

    def __rmatmul__(self, other: Any) -> Var:
        return _matmul(self._lift(other), self)

    # structure

    def __getitem__(self, key: Any) -> Var:
        def backward(g: np.ndarray, out: np.ndarray, a: np.ndarray):
            grad = np.zeros_like(a)
            np.add.at(grad, key, g)
            return (grad,)

        return self.tape.record('index', (self,), lambda a: a[key], backward)

    def reshape(self, *shape: Any) -> Var:
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.record('reshape', (self,), lambda a: a.reshape(shape), lambda g, out, a: (g.reshape(a.shape),))

    @property
    def T(self) -> Var:
        return self.tape.record('transpose', (self,), lambda a: a.T, lambda g, out, a: (g.T,))

    def sum(self) -> Var:
        return self.tape.record('sum', (self,), lambda a: np.asarray(a.sum()), lambda g, out, a: (np.full_like(a, g),))


def _add(a: Var, b: Var) -> Var:
    return a.tape.record(
        'add', (a, b), lambda x, y: x + y, lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))
    )


def _sub(a: Var, b: Var) -> Var:
    return a.tape.record(
        'sub', (a, b), lambda x, y: x - y, lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))
    )


def _mul(a: Var, b: Var) -> Var:
    return a.tape.record(
        'mul',
        (a, b),
        lambda x, y: x * y,
        lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def _div(a: Var, b: Var) -> Var:
    return a.tape.record(
        'div',
        (a, b),
        lambda x, y: x / y,
        lambda g, out, x, y: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
    )


def _matmul_backward(g: np.ndarray, out: np.ndarray, a: np.ndarray, b: np.ndarray):
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    return g @ b.T, a.T @ g


def _matmul(a: Var, b: Var) -> Var:
    return a.tape.record('matmul', (a, b), lambda x, y: x @ y, _matmul_backward)


# dispatching helpers: ndarray in, ndarray out; Var in, Var out

ArrayLike = Union[np.ndarray, Var]


def is_var(x: Any) -> bool:
    return isinstance(x, Var)


def value_of(x: Any) -> np.ndarray:
    """Returns the primal value of ``x`` whether or not it is recorded."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=float)


def _tape_of(items: Iterable[Any]) -> Optional[Tape]:
    for item in items:
        if isinstance(item, Var):
            return item.tape
    return None


def tanh(x: Any) -> Any:
    if isinstance(x, Var):
        return x.tape.record('tanh', (x,), np.tanh, lambda g, out, a: (g * (1.0 - out * out),))
    return np.tanh(x)


def sqrt(x: Any, floor: float = 0.0) -> Any:
    """Square root of ``max(x, floor)``.

    The derivative is zero for ``x <= floor`` and is evaluated at ``max(x, 1e-12)`` otherwise.
    """

    def backward(g: np.ndarray, out: np.ndarray, a: np.ndarray):
        return (np.where(a > floor, 0.5 * g / np.sqrt(np.maximum(a, SQRT_FLOOR)), 0.0),)

    if isinstance(x, Var):
        return x.tape.record('sqrt', (x,), lambda a: np.sqrt(np.maximum(a, floor)), backward)
    return np.sqrt(np.maximum(x, floor))


def absolute(x: Any) -> Any:
    if isinstance(x, Var):
        return x.tape.record('abs', (x,), np.abs, lambda g, out, a: (g * np.sign(a),))
    return np.abs(x)


def total(x: Any) -> Any:
    if isinstance(x, Var):
        return x.sum()
    return np.asarray(x, dtype=float).sum()


def sumsq(x: Any) -> Any:
    if isinstance(x, Var):
        return x.tape.record('sumsq', (x,), lambda a: np.asarray(np.sum(a * a)), lambda g, out, a: (2.0 * g * a,))
    x = np.asarray(x, dtype=float)
    return np.sum(x * x)


def _maxabs_backward(g: np.ndarray, out: np.ndarray, a: np.ndarray):
    grad = np.zeros_like(a)
    if a.size:
        k = np.unravel_index(np.argmax(np.abs(a)), a.shape)
        grad[k] = g * np.sign(a[k])
    return (grad,)


def maxabs(x: Any) -> Any:
    """Max-norm; zero for an empty input."""
    forward = lambda a: np.asarray(np.max(np.abs(a)) if a.size else 0.0)
    if isinstance(x, Var):
        return x.tape.record('maxabs', (x,), forward, _maxabs_backward)
    return forward(np.asarray(x, dtype=float))


def dot(a: Any, b: Any) -> Any:
    tape = _tape_of((a, b))
    if tape is None:
        return np.dot(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    a = a if isinstance(a, Var) else tape.constant(a)
    b = b if isinstance(b, Var) else tape.constant(b)
    return tape.record('dot', (a, b), lambda x, y: np.asarray(np.dot(x, y)), lambda g, out, x, y: (g * y, g * x))


def concat(parts: Sequence[Any]) -> Any:
    """Concatenates 1-D pieces; scalars count as length-one pieces."""
    tape = _tape_of(parts)
    if tape is None:
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])

    lifted = [p if isinstance(p, Var) else tape.constant(np.atleast_1d(np.asarray(p, dtype=float))) for p in parts]
    sizes = [max(p.value.size, 1) if p.value.ndim == 0 else p.value.shape[0] for p in lifted]
    offsets = np.cumsum([0] + sizes)

    def forward(*values: np.ndarray) -> np.ndarray:
        return np.concatenate([np.atleast_1d(v) for v in values])

    def backward(g: np.ndarray, out: np.ndarray, *values: np.ndarray):
        return tuple(g[offsets[i] : offsets[i + 1]].reshape(v.shape) for i, v in enumerate(values))

    return tape.record('concat', lifted, forward, backward)


def stack(rows: Sequence[Any]) -> Any:
    tape = _tape_of(rows)
    if tape is None:
        return np.stack([np.asarray(r, dtype=float) for r in rows])

    lifted = [r if isinstance(r, Var) else tape.constant(r) for r in rows]

    def backward(g: np.ndarray, out: np.ndarray, *values: np.ndarray):
        return tuple(g[i] for i in range(len(values)))

    return tape.record('stack', lifted, lambda *values: np.stack(values), backward)


def is_finite(x: Any) -> bool:
    return bool(np.all(np.isfinite(value_of(x))))


# gradients


Objective = Callable[[Any], Any]


def grad(objective: Objective, z: Any) -> tuple[float, np.ndarray]:
    """Evaluates ``objective`` at ``z`` on a fresh tape and returns its value and gradient.

    The tape is discarded once the backward sweep is done.
    """
    z = np.array(z, dtype=float)
    tape = Tape()
    variable = tape.leaf(z)
    output = objective(variable)
    if not isinstance(output, Var):
        value = float(np.asarray(output))
        return value, np.zeros_like(z)

    if output.value.size != 1:
        raise InvalidInput(f'objective must be scalar, got shape {output.value.shape}')

    adjoints = tape.backward(output.reshape(()) if output.value.ndim else output)
    gradient = adjoints[variable.index]
    if gradient is None:
        gradient = np.zeros_like(z)

    log.debug('gradient taped over %d nodes', len(tape))
    return float(output.value), gradient


def fd_grad(objective: Objective, z: Any, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a plainly evaluated objective."""
    if eps <= 0:
        raise InvalidInput('finite-difference step must be positive')

    z = np.array(z, dtype=float)
    result = np.zeros_like(z)
    for i in range(z.size):
        step = np.zeros_like(z)
        step.flat[i] = eps
        result.flat[i] = (float(objective(z + step)) - float(objective(z - step))) / (2.0 * eps)
    return result
