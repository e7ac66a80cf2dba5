"""Dense float64 matrices with tape-based reverse-mode differentiation.

Only the primitives the hashing objective needs are provided. A ``Matrix``
created without a tape is a constant; any operation touching a taped operand
is recorded on that tape, and ``Tape.backward`` replays the records in
reverse creation order (creation order is already topological).

Conventions at kinks: ``abs`` and ``relu`` both use derivative 0 at 0.
Binary operations accept identical shapes or a row/column/scalar operand
that broadcasts against the other; nothing more general.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

__all__ = [
    "Matrix",
    "Tape",
    "as_matrix",
    "identity",
    "matmul",
    "transpose",
    "elementwise",
    "reduce",
    "tanh",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "absolute",
    "add",
    "sub",
    "mul",
    "scale",
    "clamp",
    "total",
    "mean",
    "row_sum",
    "row_mean",
]

LOG_CLAMP = (1e-7, 1.0 - 1e-7)


class Matrix:
    """A 2-D float64 array, optionally recorded on a :class:`Tape`."""

    __slots__ = ("data", "tape", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Matrix needs at most 2 dimensions, got {arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite value in matrix {name or ''}".strip())
        self.data = arr
        self.tape = tape
        self.grad = None
        self.name = name
        self._parents: tuple[Matrix, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> "Matrix":
        return transpose(self)

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        taped = " taped" if self.tape is not None else ""
        return f"Matrix(shape={self.shape}{tag}{taped})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Matrix division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records taped operations and replays them backward.

    ``backward`` zeroes every accumulator before propagating, so calling it
    twice on the same output gives identical gradients instead of doubling.
    """

    def __init__(self):
        self._nodes: list[Matrix] = []
        self._leaves: list[Matrix] = []

    def __len__(self):
        return len(self._nodes)

    def parameter(self, data, name: str | None = None) -> Matrix:
        if name is None:
            name = f"p{len(self._leaves)}"
        if any(leaf.name == name for leaf in self._leaves):
            raise ContractError(f"duplicate parameter name {name!r}")
        leaf = Matrix(data, tape=self, name=name)
        self._nodes.append(leaf)
        self._leaves.append(leaf)
        return leaf

    def _record(self, node: Matrix) -> None:
        self._nodes.append(node)

    def reset(self) -> None:
        self._nodes.clear()
        self._leaves.clear()

    def backward(self, output: Matrix) -> dict[str, np.ndarray]:
        if output.tape is not self:
            raise ContractError("output was not produced on this tape")
        if output.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 output, got {output.shape}")
        for node in self._nodes:
            node.grad = np.zeros_like(node.data)
        output.grad = np.ones((1, 1))
        stop = self._nodes.index(output)
        for node in reversed(self._nodes[: stop + 1]):
            if node._vjp is None or not node.grad.any():
                continue
            parent_grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if parent.tape is None or g is None:
                    continue
                parent.grad += g
        return {leaf.name: leaf.grad.copy() for leaf in self._leaves}


def as_matrix(value) -> Matrix:
    return value if isinstance(value, Matrix) else Matrix(value)


def identity(n: int) -> Matrix:
    return Matrix(np.eye(n))


def _tape_of(operands: Iterable[Matrix]) -> Tape | None:
    tape = None
    for op in operands:
        if op.tape is None:
            continue
        if tape is None:
            tape = op.tape
        elif op.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


def _result(data: np.ndarray, parents: tuple[Matrix, ...], vjp: Callable, opname: str) -> Matrix:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{opname} produced a non-finite value")
    tape = _tape_of(parents)
    out = Matrix.__new__(Matrix)
    out.data = data
    out.tape = tape
    out.grad = None
    out.name = None
    out._parents = ()
    out._vjp = None
    if tape is not None:
        out._parents = parents
        out._vjp = vjp
        tape._record(out)
    return out


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], opname: str) -> tuple[int, int]:
    shape = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise ShapeError(f"{opname}: shapes {a} and {b} do not broadcast")
    return tuple(shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def matmul(a, b) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a) -> Matrix:
    a = as_matrix(a)
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


# -- unary -----------------------------------------------------------------

def tanh(a) -> Matrix:
    a = as_matrix(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Matrix:
    a = as_matrix(a)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def sigmoid(a) -> Matrix:
    a = as_matrix(a)
    # tanh form avoids overflow in exp(-x) for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Matrix:
    a = as_matrix(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Matrix:
    a = as_matrix(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value; clamp first")
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def absolute(a) -> Matrix:
    a = as_matrix(a)
    sgn = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def scale(a, c: float) -> Matrix:
    a = as_matrix(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def clamp(a, lo: float = LOG_CLAMP[0], hi: float = LOG_CLAMP[1]) -> Matrix:
    a = as_matrix(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# -- binary ----------------------------------------------------------------

def add(a, b) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


# -- reductions --------------------------------------------------------------

def _nonempty(a: Matrix, opname: str) -> None:
    if a.data.size == 0:
        raise ShapeError(f"{opname} of an empty matrix")


def total(a) -> Matrix:
    a = as_matrix(a)
    _nonempty(a, "sum")
    shape = a.shape
    return _result(a.data.sum().reshape(1, 1), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a) -> Matrix:
    a = as_matrix(a)
    _nonempty(a, "mean")
    shape, n = a.shape, a.data.size
    return _result(a.data.mean().reshape(1, 1), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def row_sum(a) -> Matrix:
    a = as_matrix(a)
    _nonempty(a, "row-sum")
    shape = a.shape
    return _result(a.data.sum(axis=1, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "row-sum")


def row_mean(a) -> Matrix:
    a = as_matrix(a)
    _nonempty(a, "row-mean")
    shape, k = a.shape, a.shape[1]
    return _result(a.data.mean(axis=1, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g / k, shape).copy(),), "row-mean")


_UNARY = {
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "abs": absolute,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}
_REDUCE = {"sum": total, "mean": mean, "row-sum": row_sum, "row-mean": row_mean}


def elementwise(op: str, *operands, **kwargs) -> Matrix:
    """Dispatch an elementwise primitive by name.

    ``scalar-mul`` takes ``(matrix, c)``; ``clamp`` takes ``(matrix, lo, hi)``
    with the log-safe interval as default.
    """
    if op in _UNARY:
        if len(operands) != 1:
            raise ContractError(f"{op} takes one operand")
        return _UNARY[op](operands[0])
    if op in _BINARY:
        if len(operands) != 2:
            raise ContractError(f"{op} takes two operands")
        a, b = as_matrix(operands[0]), as_matrix(operands[1])
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
        return _BINARY[op](a, b)
    if op == "scalar-mul":
        return scale(*operands, **kwargs)
    if op == "clamp":
        return clamp(*operands, **kwargs)
    raise ContractError(f"unknown elementwise op {op!r}")


def reduce(op: str, m) -> Matrix:
    if op not in _REDUCE:
        raise ContractError(f"unknown reduction {op!r}")
    return _REDUCE[op](m)
