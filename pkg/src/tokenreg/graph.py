"""
Dense float64 computation graph with reverse-mode differentiation.

Graphs are assembled with a GraphBuilder and frozen with build(root). A frozen Graph
never changes: forward() returns a Tape holding every node value, and gradient() walks
a tape backwards without writing to it, so one graph can be evaluated from many threads.

Broadcasting is limited to scalar-with-array. The one explicit exception is add_row,
which adds a vector to every row of a matrix (affine layers).
"""

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import GraphUsageError, NonFiniteError, ShapeError

Shape = Tuple[int, ...]
Operand = Union['Var', float, int, np.ndarray]


@dataclass(frozen=True, eq=False)
class Node:
    """One op record. `inputs` are indices of earlier nodes."""
    index: int
    op: str
    inputs: Tuple[int, ...]
    shape: Shape
    attrs: Tuple = ()
    label: str = ''

    def describe(self) -> str:
        tag = f"#{self.index}:{self.op}"
        return f"{tag} '{self.label}'" if self.label else tag


@dataclass(frozen=True, eq=False)
class Var:
    """Handle to a node under construction."""
    builder: 'GraphBuilder'
    index: int
    shape: Shape

    __array_ufunc__ = None

    def __add__(self, other: Operand) -> 'Var':
        return self.builder.add(self, other)

    def __radd__(self, other: Operand) -> 'Var':
        return self.builder.add(other, self)

    def __sub__(self, other: Operand) -> 'Var':
        return self.builder.sub(self, other)

    def __rsub__(self, other: Operand) -> 'Var':
        return self.builder.sub(other, self)

    def __mul__(self, other: Operand) -> 'Var':
        return self.builder.mul(self, other)

    def __rmul__(self, other: Operand) -> 'Var':
        return self.builder.mul(other, self)

    def __neg__(self) -> 'Var':
        return self.builder.neg(self)

    def __matmul__(self, other: 'Var') -> 'Var':
        return self.builder.matmul(self, other)


@dataclass(frozen=True, eq=False)
class Graph:
    """Frozen, topologically ordered node list ending at `root`."""
    nodes: Tuple[Node, ...]
    root: int
    leaves: Mapping[str, int]

    @property
    def root_shape(self) -> Shape:
        return self.nodes[self.root].shape


@dataclass(frozen=True, eq=False)
class Tape:
    """Forward workspace: one value per node of `graph`."""
    graph: Graph
    values: Tuple[np.ndarray, ...]

    @property
    def value(self) -> np.ndarray:
        return self.values[self.graph.root]

    def __getitem__(self, var: 'Var') -> np.ndarray:
        return self.values[var.index]


class GraphBuilder:
    """Single-writer graph assembly. Shapes are checked as nodes are added."""

    def __init__(self):
        self._nodes: list = []
        self._leaves: Dict[str, int] = {}

    # --- node creation -------------------------------------------------------

    def _push(self, op: str, inputs: Sequence[int], shape: Shape,
              attrs: Tuple = (), label: Optional[str] = None) -> Var:
        node = Node(len(self._nodes), op, tuple(inputs), tuple(shape), attrs, label or '')
        self._nodes.append(node)
        return Var(self, node.index, node.shape)

    def _pending(self, op: str, label: Optional[str]) -> str:
        return Node(len(self._nodes), op, (), (), (), label or '').describe()

    def _lift(self, x: Operand) -> Var:
        if isinstance(x, Var):
            if x.builder is not self:
                raise GraphUsageError("operand belongs to another graph")
            return x
        return self.constant(x)

    def leaf(self, name: str, shape: Sequence[int]) -> Var:
        if name in self._leaves:
            raise GraphUsageError(f"duplicate leaf name '{name}'")
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"leaf dimensions must be positive, got {shape}",
                             self._pending('leaf', name))
        var = self._push('leaf', (), shape, (name,), name)
        self._leaves[name] = var.index
        return var

    def constant(self, value, label: Optional[str] = None) -> Var:
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("constant is not finite", self._pending('const', label))
        arr.setflags(write=False)
        return self._push('const', (), arr.shape, (arr,), label)

    # --- elementwise ---------------------------------------------------------

    def _binary(self, op: str, a: Operand, b: Operand, label: Optional[str]) -> Var:
        a, b = self._lift(a), self._lift(b)
        if a.shape == b.shape or b.shape == ():
            shape = a.shape
        elif a.shape == ():
            shape = b.shape
        else:
            raise ShapeError(f"{op} of {a.shape} and {b.shape}", self._pending(op, label))
        return self._push(op, (a.index, b.index), shape, (), label)

    def add(self, a: Operand, b: Operand, label: Optional[str] = None) -> Var:
        return self._binary('add', a, b, label)

    def sub(self, a: Operand, b: Operand, label: Optional[str] = None) -> Var:
        return self._binary('sub', a, b, label)

    def mul(self, a: Operand, b: Operand, label: Optional[str] = None) -> Var:
        return self._binary('mul', a, b, label)

    def minimum(self, a: Operand, b: Operand, label: Optional[str] = None) -> Var:
        """Elementwise min; ties select the first argument."""
        return self._binary('minimum', a, b, label)

    def _unary(self, op: str, x: Operand, label: Optional[str], attrs: Tuple = ()) -> Var:
        x = self._lift(x)
        return self._push(op, (x.index,), x.shape, attrs, label)

    def neg(self, x: Operand, label: Optional[str] = None) -> Var:
        return self._unary('neg', x, label)

    def exp(self, x: Operand, label: Optional[str] = None) -> Var:
        return self._unary('exp', x, label)

    def log(self, x: Operand, label: Optional[str] = None) -> Var:
        return self._unary('log', x, label)

    def tanh(self, x: Operand, label: Optional[str] = None) -> Var:
        return self._unary('tanh', x, label)

    def clip(self, x: Operand, lo: float, hi: float, label: Optional[str] = None) -> Var:
        if not lo <= hi:
            raise ShapeError(f"clip bounds reversed: {lo} > {hi}", self._pending('clip', label))
        return self._unary('clip', x, label, (float(lo), float(hi)))

    def stop_gradient(self, x: Operand, label: Optional[str] = None) -> Var:
        return self._unary('stop_gradient', x, label)

    # --- structured ----------------------------------------------------------

    def matmul(self, a: Var, b: Var, label: Optional[str] = None) -> Var:
        a, b = self._lift(a), self._lift(b)
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul of {a.shape} and {b.shape}", self._pending('matmul', label))
        return self._push('matmul', (a.index, b.index), (a.shape[0], b.shape[1]), (), label)

    def add_row(self, m: Var, v: Var, label: Optional[str] = None) -> Var:
        m, v = self._lift(m), self._lift(v)
        if len(m.shape) != 2 or v.shape != (m.shape[1],):
            raise ShapeError(f"add_row of {m.shape} and {v.shape}", self._pending('add_row', label))
        return self._push('add_row', (m.index, v.index), m.shape, (), label)

    def softmax(self, x: Var, label: Optional[str] = None) -> Var:
        x = self._lift(x)
        if len(x.shape) < 1:
            raise ShapeError("softmax needs at least one axis", self._pending('softmax', label))
        return self._push('softmax', (x.index,), x.shape, (), label)

    def log_softmax(self, x: Var, label: Optional[str] = None) -> Var:
        x = self._lift(x)
        if len(x.shape) < 1:
            raise ShapeError("log_softmax needs at least one axis",
                             self._pending('log_softmax', label))
        return self._push('log_softmax', (x.index,), x.shape, (), label)

    def sum(self, x: Operand, label: Optional[str] = None) -> Var:
        x = self._lift(x)
        return self._push('sum', (x.index,), (), (), label)

    def mean(self, x: Operand, label: Optional[str] = None) -> Var:
        x = self._lift(x)
        return self._push('mean', (x.index,), (), (), label)

    def reshape(self, x: Var, shape: Sequence[int], label: Optional[str] = None) -> Var:
        x = self._lift(x)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != int(np.prod(x.shape)):
            raise ShapeError(f"reshape {x.shape} -> {shape}", self._pending('reshape', label))
        return self._push('reshape', (x.index,), shape, (), label)

    def take_rows(self, table: Var, indices, label: Optional[str] = None) -> Var:
        """Row lookup table[indices]; indices are constants."""
        table = self._lift(table)
        idx = np.array(indices, dtype=np.int64)
        if len(table.shape) != 2:
            raise ShapeError(f"take_rows needs a matrix, got {table.shape}",
                             self._pending('take_rows', label))
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise ShapeError(f"row index out of range for {table.shape}",
                             self._pending('take_rows', label))
        idx.setflags(write=False)
        return self._push('take_rows', (table.index,), idx.shape + (table.shape[1],),
                          (idx,), label)

    def pick(self, x: Var, indices, label: Optional[str] = None) -> Var:
        """Per-row selection x[t, indices[t]]."""
        x = self._lift(x)
        idx = np.array(indices, dtype=np.int64)
        if len(x.shape) != 2 or idx.shape != (x.shape[0],):
            raise ShapeError(f"pick of {x.shape} with indices {idx.shape}",
                             self._pending('pick', label))
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
            raise ShapeError("pick index out of range", self._pending('pick', label))
        idx.setflags(write=False)
        return self._push('pick', (x.index,), (x.shape[0],), (idx,), label)

    def build(self, root: Var) -> Graph:
        if root.builder is not self:
            raise GraphUsageError("root belongs to another graph")
        nodes = tuple(self._nodes[: root.index + 1])
        leaves = {name: i for name, i in self._leaves.items() if i <= root.index}
        return Graph(nodes=nodes, root=root.index, leaves=leaves)


# --- forward rules -------------------------------------------------------------

def stable_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def stable_log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


_FORWARD: Dict[str, Callable] = {
    'add': lambda n, a, b: a + b,
    'sub': lambda n, a, b: a - b,
    'mul': lambda n, a, b: a * b,
    'minimum': lambda n, a, b: np.where(a <= b, a, b),
    'neg': lambda n, a: -a,
    'exp': lambda n, a: np.exp(a),
    'log': lambda n, a: np.log(a),
    'tanh': lambda n, a: np.tanh(a),
    'clip': lambda n, a: np.clip(a, n.attrs[0], n.attrs[1]),
    'stop_gradient': lambda n, a: a,
    'matmul': lambda n, a, b: a @ b,
    'add_row': lambda n, a, b: a + b,
    'softmax': lambda n, a: stable_softmax(a),
    'log_softmax': lambda n, a: stable_log_softmax(a),
    'sum': lambda n, a: np.asarray(np.sum(a)),
    'mean': lambda n, a: np.asarray(np.mean(a)),
    'reshape': lambda n, a: a.reshape(n.shape),
    'take_rows': lambda n, a: a[n.attrs[0]],
    'pick': lambda n, a: a[np.arange(a.shape[0]), n.attrs[0]],
}


def forward(graph: Graph, leaf_bindings: Mapping[str, np.ndarray]) -> Tape:
    """Evaluate every node. Leaf values are copied so later mutation cannot leak in."""
    values = []
    with np.errstate(all='ignore'):
        for node in graph.nodes:
            if node.op == 'leaf':
                name = node.attrs[0]
                if name not in leaf_bindings:
                    raise GraphUsageError("leaf is not bound", node.describe())
                value = np.array(leaf_bindings[name], dtype=np.float64)
                if value.shape != node.shape:
                    raise ShapeError(f"bound {value.shape}, declared {node.shape}",
                                     node.describe())
            elif node.op == 'const':
                value = node.attrs[0]
            else:
                value = _FORWARD[node.op](node, *(values[i] for i in node.inputs))
            if not np.all(np.isfinite(value)):
                raise NonFiniteError("non-finite value", node.describe())
            values.append(value)
    return Tape(graph, tuple(values))


def evaluate(graph: Graph, leaf_bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    return forward(graph, leaf_bindings).value


# --- backward rules ------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: Shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(np.sum(g))


def _backward(node: Node, g: np.ndarray, ins: Sequence[np.ndarray], out: np.ndarray):
    op = node.op
    if op == 'add':
        return _unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)
    if op == 'sub':
        return _unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)
    if op == 'mul':
        a, b = ins
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    if op == 'minimum':
        a, b = ins
        first = a <= b
        zero = np.zeros_like(g)
        return (_unbroadcast(np.where(first, g, zero), a.shape),
                _unbroadcast(np.where(first, zero, g), b.shape))
    if op == 'neg':
        return (-g,)
    if op == 'exp':
        return (g * out,)
    if op == 'log':
        return (g / ins[0],)
    if op == 'tanh':
        return (g * (1.0 - out * out),)
    if op == 'clip':
        lo, hi = node.attrs
        inside = (ins[0] >= lo) & (ins[0] <= hi)
        return (np.where(inside, g, 0.0),)
    if op == 'matmul':
        a, b = ins
        return g @ b.T, a.T @ g
    if op == 'add_row':
        return g, g.sum(axis=0)
    if op == 'softmax':
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)
    if op == 'log_softmax':
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)
    if op == 'sum':
        return (np.full(ins[0].shape, float(g)),)
    if op == 'mean':
        return (np.full(ins[0].shape, float(g) / ins[0].size),)
    if op == 'reshape':
        return (g.reshape(ins[0].shape),)
    if op == 'take_rows':
        table = np.zeros(ins[0].shape)
        np.add.at(table, node.attrs[0], g)
        return (table,)
    if op == 'pick':
        full = np.zeros(ins[0].shape)
        full[np.arange(ins[0].shape[0]), node.attrs[0]] = g
        return (full,)
    raise GraphUsageError(f"no backward rule for op '{op}'", node.describe())


def gradient(tape: Tape, wrt: Iterable[str]) -> Dict[str, np.ndarray]:
    """d(root)/d(leaf) for each requested leaf name. The tape is only read."""
    graph = tape.graph
    root = graph.nodes[graph.root]
    if root.shape != ():
        raise GraphUsageError(f"gradient needs a scalar root, got {root.shape}", root.describe())
    wrt = list(wrt)
    for name in wrt:
        if name not in graph.leaves:
            raise GraphUsageError(f"'{name}' is not a leaf of this graph")

    grads: list = [None] * len(graph.nodes)
    grads[graph.root] = np.ones(())
    for node in reversed(graph.nodes):
        g = grads[node.index]
        if g is None or node.op in ('leaf', 'const', 'stop_gradient'):
            continue
        ins = [tape.values[i] for i in node.inputs]
        for i, ig in zip(node.inputs, _backward(node, g, ins, tape.values[node.index])):
            if ig is None:
                continue
            grads[i] = ig if grads[i] is None else grads[i] + ig

    result = {}
    for name in wrt:
        index = graph.leaves[name]
        g = grads[index]
        g = np.zeros(graph.nodes[index].shape) if g is None else np.array(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient", graph.nodes[index].describe())
        result[name] = g
    return result


def value_and_grad(graph: Graph, leaf_bindings: Mapping[str, np.ndarray],
                   wrt: Iterable[str]) -> Tuple[float, Dict[str, np.ndarray]]:
    tape = forward(graph, leaf_bindings)
    return float(tape.value), gradient(tape, wrt)
