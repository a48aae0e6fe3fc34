"""Tape-based reverse-mode differentiation over small dense float64 arrays.

The tape records a fixed set of primitives over rank-0/1/2 arrays. Values are
immutable once recorded and every output is checked for finiteness, so NaN/Inf
surfaces at the op that produced it instead of poisoning a whole training step.
Softmax and logsumexp subtract the row maximum internally; contrastive
denominators overflow without that.

Most call sites use the `Node` handle (operator overloading) rather than raw
`Tape.apply`. The module-level helpers (`exp`, `ssum`, `softmax_rows`, ...)
dispatch on type so the same formula code runs either on tape nodes (training,
gradients) or on plain numpy arrays (inference, metrics).
"""

from __future__ import annotations

from typing import Union

import numpy as np

from .errors import NonFiniteError, ShapeError

PRIMITIVES = frozenset(
    {
        "add",
        "sub",
        "mul",
        "matmul",
        "exp",
        "log",
        "tanh",
        "relu",
        "softmax-rows",
        "logsumexp-rows",
        "sum",
        "mean",
        "transpose",
        "broadcast-add-row",
        "scale",
        "square",
        "sqrt",
        "clampmin",
    }
)

# Primitives parameterized by a python-float constant rather than a second node.
_CONST_PRIMITIVES = frozenset({"scale", "clampmin"})


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"tensors are limited to rank <= 2, got shape {arr.shape}")
    return arr


def _softmax_rows_np(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def _logsumexp_rows_np(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1)
    return m + np.log(np.sum(np.exp(x - m[:, None]), axis=1))


def _forward(kind: str, vals: list[np.ndarray], c: float | None) -> np.ndarray:
    """Evaluate one primitive, validating operand shapes."""
    if kind in ("add", "sub", "mul"):
        a, b = vals
        if a.shape != b.shape:
            raise ShapeError(f"'{kind}' needs equal shapes, got {a.shape} and {b.shape}")
        if kind == "add":
            return a + b
        if kind == "sub":
            return a - b
        return a * b
    if kind == "matmul":
        a, b = vals
        if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"'matmul' got non-conforming shapes {a.shape} and {b.shape}")
        return a @ b
    if kind == "broadcast-add-row":
        a, b = vals
        if a.ndim != 2 or b.ndim != 1 or a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"'broadcast-add-row' needs (n,m) and (m,), got {a.shape} and {b.shape}"
            )
        return a + b[None, :]
    (a,) = vals
    if kind == "exp":
        return np.exp(a)
    if kind == "log":
        return np.log(a)
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "square":
        return a * a
    if kind == "sqrt":
        return np.sqrt(a)
    if kind == "scale":
        return a * c
    if kind == "clampmin":
        return np.maximum(a, c)
    if kind == "sum":
        return np.sum(a)
    if kind == "mean":
        return np.mean(a)
    if kind == "transpose":
        if a.ndim != 2:
            raise ShapeError(f"'transpose' needs rank 2, got shape {a.shape}")
        return a.T.copy()
    if kind in ("softmax-rows", "logsumexp-rows"):
        if a.ndim != 2:
            raise ShapeError(f"'{kind}' needs rank 2, got shape {a.shape}")
        return _softmax_rows_np(a) if kind == "softmax-rows" else _logsumexp_rows_np(a)
    raise ShapeError(f"unknown primitive '{kind}'")


def _accumulate(
    kind: str,
    in_ids: tuple[int, ...],
    out_id: int,
    c: float | None,
    values: list[np.ndarray],
    grads: list[np.ndarray],
) -> None:
    """Add the vector-Jacobian product of one op into its inputs' gradients."""
    g = grads[out_id]
    vals = [values[i] for i in in_ids]
    if kind == "add":
        grads[in_ids[0]] += g
        grads[in_ids[1]] += g
    elif kind == "sub":
        grads[in_ids[0]] += g
        grads[in_ids[1]] -= g
    elif kind == "mul":
        grads[in_ids[0]] += g * vals[1]
        grads[in_ids[1]] += g * vals[0]
    elif kind == "matmul":
        a, b = vals
        if a.ndim == 2 and b.ndim == 2:
            grads[in_ids[0]] += g @ b.T
            grads[in_ids[1]] += a.T @ g
        elif a.ndim == 2 and b.ndim == 1:
            grads[in_ids[0]] += np.outer(g, b)
            grads[in_ids[1]] += a.T @ g
        elif a.ndim == 1 and b.ndim == 2:
            grads[in_ids[0]] += b @ g
            grads[in_ids[1]] += np.outer(a, g)
        else:
            grads[in_ids[0]] += g * b
            grads[in_ids[1]] += g * a
    elif kind == "broadcast-add-row":
        grads[in_ids[0]] += g
        grads[in_ids[1]] += np.sum(g, axis=0)
    elif kind == "exp":
        grads[in_ids[0]] += g * values[out_id]
    elif kind == "log":
        grads[in_ids[0]] += g / vals[0]
    elif kind == "tanh":
        out = values[out_id]
        grads[in_ids[0]] += g * (1.0 - out * out)
    elif kind == "relu":
        grads[in_ids[0]] += g * (vals[0] > 0.0)
    elif kind == "square":
        grads[in_ids[0]] += g * (2.0 * vals[0])
    elif kind == "sqrt":
        grads[in_ids[0]] += g / (2.0 * values[out_id])
    elif kind == "scale":
        grads[in_ids[0]] += g * c
    elif kind == "clampmin":
        grads[in_ids[0]] += g * (vals[0] > c)
    elif kind == "sum":
        grads[in_ids[0]] += g
    elif kind == "mean":
        grads[in_ids[0]] += g / vals[0].size
    elif kind == "transpose":
        grads[in_ids[0]] += g.T
    elif kind == "softmax-rows":
        s = values[out_id]
        dot = np.sum(g * s, axis=1, keepdims=True)
        grads[in_ids[0]] += s * (g - dot)
    elif kind == "logsumexp-rows":
        sm = np.exp(vals[0] - values[out_id][:, None])
        grads[in_ids[0]] += g[:, None] * sm
    else:  # pragma: no cover - kinds are validated on the forward pass
        raise ShapeError(f"unknown primitive '{kind}'")


class Node:
    """Handle to one tape entry; arithmetic operators record new ops."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.value(self.nid)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise ShapeError("cannot combine nodes from different tapes")
            return other
        arr = np.asarray(other, dtype=np.float64)
        if arr.ndim == 0 and self.ndim > 0:
            arr = np.full(self.shape, float(arr))
        return self.tape.leaf(arr)

    def _binary(self, kind: str, other) -> "Node":
        other = self._lift(other)
        return self.tape.node(self.tape.apply(kind, self.nid, other.nid))

    def __add__(self, other):
        return self._binary("add", other)

    def __radd__(self, other):
        return self._lift(other)._binary("add", self)

    def __sub__(self, other):
        return self._binary("sub", other)

    def __rsub__(self, other):
        return self._lift(other)._binary("sub", self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.node(self.tape.apply("scale", self.nid, c=float(other)))
        return self._binary("mul", other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return self._binary("matmul", other)

    @property
    def T(self) -> "Node":
        return self.tape.node(self.tape.apply("transpose", self.nid))

    def _unary(self, kind: str, c: float | None = None) -> "Node":
        return self.tape.node(self.tape.apply(kind, self.nid, c=c))

    def exp(self):
        return self._unary("exp")

    def log(self):
        return self._unary("log")

    def tanh(self):
        return self._unary("tanh")

    def relu(self):
        return self._unary("relu")

    def square(self):
        return self._unary("square")

    def sqrt(self):
        return self._unary("sqrt")

    def clampmin(self, c: float):
        return self._unary("clampmin", c=float(c))

    def sum(self):
        return self._unary("sum")

    def mean(self):
        return self._unary("mean")

    def __repr__(self) -> str:
        return f"Node(nid={self.nid}, shape={self.shape})"


class Tape:
    """Append-only record of values and primitive ops, in topological order."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._is_leaf: list[bool] = []
        # op records: (kind, input ids, output id, constant)
        self._ops: list[tuple[str, tuple[int, ...], int, float | None]] = []

    def __len__(self) -> int:
        return len(self._values)

    def _store(self, arr: np.ndarray, is_leaf: bool) -> int:
        # Takes ownership: callers pass freshly allocated arrays.
        arr.flags.writeable = False
        self._values.append(arr)
        self._is_leaf.append(is_leaf)
        return len(self._values) - 1

    def leaf(self, value) -> Node:
        """Record an input tensor (parameter or constant)."""
        arr = _as_f64(value)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf tensor contains non-finite entries")
        return Node(self, self._store(arr.copy(), True))

    # Constants are ordinary leaves whose gradients callers simply ignore.
    const = leaf

    def value(self, nid: int) -> np.ndarray:
        return self._values[nid]

    def node(self, nid: int) -> Node:
        return Node(self, nid)

    def is_leaf(self, nid: int) -> bool:
        return self._is_leaf[nid]

    def apply(self, kind: str, *input_ids: int, c: float | None = None) -> int:
        """Record one primitive op and return the output node id."""
        if kind not in PRIMITIVES:
            raise ShapeError(f"unknown primitive '{kind}'")
        if (c is not None) != (kind in _CONST_PRIMITIVES):
            raise ShapeError(f"primitive '{kind}' got unexpected constant argument")
        vals = [self._values[i] for i in input_ids]
        with np.errstate(all="ignore"):  # non-finite results become errors below
            out = _forward(kind, vals, c)
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"primitive '{kind}' produced non-finite values")
        out_id = self._store(out, False)
        self._ops.append((kind, tuple(input_ids), out_id, c))
        return out_id

    def backward(self, loss: Union[Node, int]) -> dict[int, np.ndarray]:
        """Gradient of a scalar loss with respect to every leaf.

        Leaves not on any path to the loss get exact zero gradients. Ops are
        visited exactly once, in reverse recorded order.
        """
        loss_id = loss.nid if isinstance(loss, Node) else loss
        if self._values[loss_id].ndim != 0:
            raise ShapeError(
                f"backward needs a scalar loss, got shape {self._values[loss_id].shape}"
            )
        grads = [np.zeros_like(v) for v in self._values]
        grads[loss_id] = np.ones_like(self._values[loss_id])
        for kind, in_ids, out_id, c in reversed(self._ops):
            _accumulate(kind, in_ids, out_id, c, self._values, grads)
        out = {}
        for nid, leafy in enumerate(self._is_leaf):
            if leafy:
                g = grads[nid]
                g.flags.writeable = False
                out[nid] = g
        return out

    def replay(self) -> list[np.ndarray]:
        """Recompute every op from the recorded leaves; used to audit determinism."""
        values: list[np.ndarray] = [None] * len(self._values)  # type: ignore[list-item]
        for nid, leafy in enumerate(self._is_leaf):
            if leafy:
                values[nid] = self._values[nid]
        for kind, in_ids, out_id, c in self._ops:
            values[out_id] = _forward(kind, [values[i] for i in in_ids], c)
        return values


# ---------------------------------------------------------------------------
# Dual-mode helpers: same formula code runs on Nodes (tape) or numpy arrays.
# ---------------------------------------------------------------------------

ArrayOrNode = Union[np.ndarray, Node]


def peek(x: ArrayOrNode) -> np.ndarray:
    """Current value of a node, or the array itself."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def lift(template: ArrayOrNode, value) -> ArrayOrNode:
    """Constant with the same backend as `template`."""
    if isinstance(template, Node):
        return template.tape.leaf(value)
    return np.asarray(value, dtype=np.float64)


def exp(x: ArrayOrNode) -> ArrayOrNode:
    return x.exp() if isinstance(x, Node) else np.exp(x)


def log(x: ArrayOrNode) -> ArrayOrNode:
    return x.log() if isinstance(x, Node) else np.log(x)


def tanh(x: ArrayOrNode) -> ArrayOrNode:
    return x.tanh() if isinstance(x, Node) else np.tanh(x)


def relu(x: ArrayOrNode) -> ArrayOrNode:
    return x.relu() if isinstance(x, Node) else np.maximum(x, 0.0)


def square(x: ArrayOrNode) -> ArrayOrNode:
    return x.square() if isinstance(x, Node) else x * x


def sqrt(x: ArrayOrNode) -> ArrayOrNode:
    return x.sqrt() if isinstance(x, Node) else np.sqrt(x)


def clampmin(x: ArrayOrNode, c: float) -> ArrayOrNode:
    return x.clampmin(c) if isinstance(x, Node) else np.maximum(x, c)


def ssum(x: ArrayOrNode):
    """Full reduction to a scalar."""
    return x.sum() if isinstance(x, Node) else np.float64(np.sum(x))


def smean(x: ArrayOrNode):
    return x.mean() if isinstance(x, Node) else np.float64(np.mean(x))


def softmax_rows(x: ArrayOrNode) -> ArrayOrNode:
    if isinstance(x, Node):
        return x.tape.node(x.tape.apply("softmax-rows", x.nid))
    return _softmax_rows_np(np.asarray(x, dtype=np.float64))


def logsumexp_rows(x: ArrayOrNode) -> ArrayOrNode:
    if isinstance(x, Node):
        return x.tape.node(x.tape.apply("logsumexp-rows", x.nid))
    return _logsumexp_rows_np(np.asarray(x, dtype=np.float64))


def badd_row(mat: ArrayOrNode, row: ArrayOrNode) -> ArrayOrNode:
    """Add a length-m row vector to each row of an (n, m) matrix."""
    if isinstance(mat, Node) or isinstance(row, Node):
        if not isinstance(mat, Node):
            mat = row.tape.leaf(mat)  # type: ignore[union-attr]
        if not isinstance(row, Node):
            row = mat.tape.leaf(row)
        return mat.tape.node(mat.tape.apply("broadcast-add-row", mat.nid, row.nid))
    return mat + np.asarray(row)[None, :]


def rowsum(x: ArrayOrNode) -> ArrayOrNode:
    """Per-row sum of an (n, m) operand, returning shape (n,)."""
    if isinstance(x, Node):
        ones = x.tape.leaf(np.ones(x.shape[1]))
        return x @ ones
    return np.sum(x, axis=1)


def colbroad(x: ArrayOrNode, ncols: int) -> ArrayOrNode:
    """Tile a length-n vector into an (n, ncols) matrix (column broadcast)."""
    if isinstance(x, Node):
        zeros = x.tape.leaf(np.zeros((ncols, x.shape[0])))
        return badd_row(zeros, x).T
    return np.repeat(np.asarray(x)[:, None], ncols, axis=1)
