"""
Dense float64 tensors recorded on a dynamic tape for reverse-mode differentiation.

Every forward pass builds a fresh graph of DiffNode objects. Each op stores, per parent, a
closure mapping the upstream gradient to that parent's contribution. backward() walks the
graph in reverse topological order and accumulates the contributions.
"""

import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.special import expit, log_expit

from src.common.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float64]
GradFn = Callable[[Tensor], Tensor]
Operand = Union["DiffNode", float, int, np.ndarray]


def as_tensor(x, op: str = "tensor") -> Tensor:
    """Converts x to a float64 array and rejects NaN/Inf entries."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op, arr.shape)
    return arr


class DiffNode:
    """A value on the tape plus its gradient slot and parent closures."""

    __slots__ = ("value", "parents", "op", "name", "requires_grad", "_grad")

    def __init__(
        self,
        value,
        parents: Sequence[Tuple["DiffNode", GradFn]] = (),
        op: str = "constant",
        name: Optional[str] = None,
        requires_grad: bool = False,
    ):
        self.value = as_tensor(value, op)
        self.parents = tuple(parents)
        self.op = op
        self.name = name
        self.requires_grad = requires_grad or bool(self.parents)
        self._grad: Optional[Tensor] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> Tensor:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def is_parameter(self) -> bool:
        return self.op == "parameter"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def _accumulate(self, contribution: Tensor) -> None:
        if self._grad is None:
            self._grad = np.array(contribution, dtype=np.float64, copy=True)
        else:
            self._grad = self._grad + contribution

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"DiffNode(op={self.op}{label} shape={self.shape})"

    def __add__(self, other: Operand) -> "DiffNode":
        return add(self, other)

    def __radd__(self, other: Operand) -> "DiffNode":
        return add(other, self)

    def __sub__(self, other: Operand) -> "DiffNode":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "DiffNode":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "DiffNode":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "DiffNode":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "DiffNode":
        return div(self, other)

    def __neg__(self) -> "DiffNode":
        return mul(self, -1.0)

    def __matmul__(self, other: "DiffNode") -> "DiffNode":
        return matmul(self, other)


def constant(value) -> DiffNode:
    return DiffNode(value, op="constant")


def parameter(value, name: str) -> DiffNode:
    """Leaf node whose gradient is reported by backward() under `name`."""
    return DiffNode(value, op="parameter", name=name, requires_grad=True)


def detach(node: DiffNode) -> DiffNode:
    return constant(node.value)


def _lift(x: Operand) -> DiffNode:
    return x if isinstance(x, DiffNode) else constant(x)


def _make(value, op: str, parents: Sequence[Tuple[DiffNode, GradFn]]) -> DiffNode:
    live = [(p, fn) for p, fn in parents if p.requires_grad]
    return DiffNode(value, parents=live, op=op)


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: DiffNode, b: DiffNode) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- Element-wise arithmetic ---


def add(a: Operand, b: Operand) -> DiffNode:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    return _make(
        a.value + b.value,
        "add",
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ],
    )


def sub(a: Operand, b: Operand) -> DiffNode:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.value - b.value,
        "sub",
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ],
    )


def mul(a: Operand, b: Operand) -> DiffNode:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.value * b.value,
        "mul",
        [
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ],
    )


def div(a: Operand, b: Operand) -> DiffNode:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value
    return _make(
        value,
        "div",
        [
            (a, lambda g: _unbroadcast(g / b.value, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.shape)),
        ],
    )


def scale(a: DiffNode, factor: float) -> DiffNode:
    return _make(a.value * factor, "scale", [(a, lambda g: g * factor)])


# --- Linear algebra and shape ops ---


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(
        a.value @ b.value,
        "matmul",
        [
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ],
    )


def concat(nodes: Sequence[DiffNode], axis: int = 0) -> DiffNode:
    first = nodes[0]
    for other in nodes[1:]:
        if other.value.ndim != first.value.ndim or any(
            s != o
            for i, (s, o) in enumerate(zip(first.shape, other.shape))
            if i != axis % first.value.ndim
        ):
            raise ShapeError("concat", first.shape, other.shape)
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum(sizes)[:-1]
    value = np.concatenate([n.value for n in nodes], axis=axis)

    def piece(i: int) -> GradFn:
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return _make(value, "concat", [(n, piece(i)) for i, n in enumerate(nodes)])


def reshape(a: DiffNode, shape: Sequence[int]) -> DiffNode:
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(value, "reshape", [(a, lambda g: g.reshape(a.shape))])


def sum(a: DiffNode, axis: Optional[int] = None, keepdims: bool = False) -> DiffNode:
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g: Tensor) -> Tensor:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape)

    return _make(value, "sum", [(a, grad_fn)])


def mean(a: DiffNode, axis: Optional[int] = None, keepdims: bool = False) -> DiffNode:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def gather_rows(table: DiffNode, index: np.ndarray) -> DiffNode:
    """Row lookup (embedding tables, per-sample broadcasting); grads scatter-add back."""
    index = np.asarray(index, dtype=np.int64)

    def grad_fn(g: Tensor) -> Tensor:
        out = np.zeros_like(table.value)
        np.add.at(out, index, g)
        return out

    return _make(table.value[index], "gather_rows", [(table, grad_fn)])


# --- Ragged (per-sample) ops over concatenated node rows ---


def _segment_lengths(op: str, offsets: np.ndarray, rows: int) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    lengths = np.diff(offsets)
    if offsets[0] != 0 or offsets[-1] != rows or np.any(lengths <= 0):
        raise ShapeError(op, (rows,), tuple(offsets.tolist()))
    return lengths


def segment_sum(a: DiffNode, offsets: np.ndarray) -> DiffNode:
    """Sums row blocks a[offsets[s]:offsets[s+1]]; every block must be nonempty."""
    lengths = _segment_lengths("segment_sum", offsets, a.shape[0])
    value = np.add.reduceat(a.value, np.asarray(offsets[:-1], dtype=np.int64), axis=0)
    return _make(value, "segment_sum", [(a, lambda g: np.repeat(g, lengths, axis=0))])


def segment_mean(a: DiffNode, offsets: np.ndarray) -> DiffNode:
    lengths = _segment_lengths("segment_mean", offsets, a.shape[0])
    inv = (1.0 / lengths).reshape((-1,) + (1,) * (a.value.ndim - 1))
    return mul(segment_sum(a, offsets), inv)


def block_matmul(
    a: DiffNode,
    b: DiffNode,
    a_offsets: np.ndarray,
    b_offsets: np.ndarray,
    transpose_a: bool = False,
) -> DiffNode:
    """
    Per-segment matrix products stacked along rows.

    With transpose_a the block for segment s is a_s.T @ b_s, otherwise a_s @ b_s, where a_s and
    b_s are the row ranges of segment s in a and b.
    """
    if a.value.ndim != 2 or b.value.ndim != 2 or len(a_offsets) != len(b_offsets):
        raise ShapeError("block_matmul", a.shape, b.shape)
    blocks = list(zip(zip(a_offsets[:-1], a_offsets[1:]), zip(b_offsets[:-1], b_offsets[1:])))
    outputs: List[Tensor] = []
    for (a0, a1), (b0, b1) in blocks:
        a_s, b_s = a.value[a0:a1], b.value[b0:b1]
        inner_a = a_s.shape[0] if transpose_a else a_s.shape[1]
        if inner_a != b_s.shape[0]:
            raise ShapeError("block_matmul", a_s.shape, b_s.shape)
        outputs.append(a_s.T @ b_s if transpose_a else a_s @ b_s)
    out_bounds = np.concatenate([[0], np.cumsum([o.shape[0] for o in outputs])])
    value = np.concatenate(outputs, axis=0)

    def grad_a(g: Tensor) -> Tensor:
        out = np.zeros_like(a.value)
        for s, ((a0, a1), (b0, b1)) in enumerate(blocks):
            g_s = g[out_bounds[s] : out_bounds[s + 1]]
            b_s = b.value[b0:b1]
            out[a0:a1] = b_s @ g_s.T if transpose_a else g_s @ b_s.T
        return out

    def grad_b(g: Tensor) -> Tensor:
        out = np.zeros_like(b.value)
        for s, ((a0, a1), (b0, b1)) in enumerate(blocks):
            g_s = g[out_bounds[s] : out_bounds[s + 1]]
            a_s = a.value[a0:a1]
            out[b0:b1] = a_s @ g_s if transpose_a else a_s.T @ g_s
        return out

    return _make(value, "block_matmul", [(a, grad_a), (b, grad_b)])


# --- Nonlinearities ---


def sigmoid(a: DiffNode) -> DiffNode:
    s = expit(a.value)
    return _make(s, "sigmoid", [(a, lambda g: g * s * (1.0 - s))])


def relu(a: DiffNode) -> DiffNode:
    active = a.value > 0
    return _make(np.where(active, a.value, 0.0), "relu", [(a, lambda g: g * active)])


def clamp(a: DiffNode, lo: float, hi: float) -> DiffNode:
    """Clips to [lo, hi]; the gradient is zero wherever the input is not strictly inside."""
    inside = (a.value > lo) & (a.value < hi)
    return _make(np.clip(a.value, lo, hi), "clamp", [(a, lambda g: g * inside)])


def log(a: DiffNode) -> DiffNode:
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _make(value, "log", [(a, lambda g: g / a.value)])


def dropout(a: DiffNode, p: float, rng: np.random.Generator, train: bool = True) -> DiffNode:
    """Inverted dropout; eval mode (or p == 0) returns the input node itself."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.value * mask, "dropout", [(a, lambda g: g * mask)])


# --- Parameter initialisation ---


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def embedding_table(rng: np.random.Generator, rows: int, dim: int, std: float = 0.1) -> Tensor:
    return rng.normal(0.0, std, size=(rows, dim))


# --- Scoring and losses ---


def bilinear(a: DiffNode, w: DiffNode, b: DiffNode) -> DiffNode:
    """Row-wise a_i^T W b_i for a, b of shape (n, d) and W of shape (d, d)."""
    if (
        a.value.ndim != 2
        or a.shape != b.shape
        or w.shape != (a.shape[1], b.shape[1])
    ):
        raise ShapeError("bilinear", a.shape, w.shape if a.shape == b.shape else b.shape)
    aw = a.value @ w.value
    value = (aw * b.value).sum(axis=1)
    return _make(
        value,
        "bilinear",
        [
            (a, lambda g: g[:, None] * (b.value @ w.value.T)),
            (w, lambda g: a.value.T @ (g[:, None] * b.value)),
            (b, lambda g: g[:, None] * aw),
        ],
    )


def bce_with_logits(logits: DiffNode, targets) -> DiffNode:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, y.shape)
    x = logits.value
    n = max(x.size, 1)
    losses = -(y * log_expit(x) + (1.0 - y) * log_expit(-x))
    return _make(
        losses.sum() / n,
        "bce_with_logits",
        [(logits, lambda g: g * (expit(x) - y) / n)],
    )


# --- Backward pass ---


def _topological_order(root: DiffNode) -> List[DiffNode]:
    order: List[DiffNode] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(
    loss: DiffNode, params: Optional[Mapping[str, DiffNode]] = None
) -> Dict[str, Tensor]:
    """
    Populates gradients of every node reachable from a scalar loss.

    Returns a map from parameter name to gradient. When `params` is given, parameters the loss
    does not reach are reported with zero gradients.
    """
    if loss.value.size != 1:
        raise ShapeError("backward", loss.shape, ())
    order = _topological_order(loss)
    loss._accumulate(np.ones_like(loss.value))
    for node in reversed(order):
        if node._grad is None:
            continue
        for parent, grad_fn in node.parents:
            parent._accumulate(grad_fn(node._grad))

    grads = {node.name: node.grad for node in order if node.is_parameter}
    for name, node in (params or {}).items():
        grads.setdefault(name, node.grad)
    return grads
