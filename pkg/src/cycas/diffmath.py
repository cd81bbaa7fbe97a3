"""Reverse-mode differentiation over dense 2-D float64 matrices.

Every value is a ``numpy.ndarray`` of shape ``(rows, cols)``. Vectors are
column (n x 1) or row (1 x n) matrices; scalars are 1 x 1.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class GradientStateError(RuntimeError):
    pass


def as_matrix(x) -> np.ndarray:
    a = np.array(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


class Node:
    """A value in the computation graph.

    ``grad`` is ``None`` until a backward pass reaches the node.
    """

    __slots__ = ("value", "grad", "parents", "op", "_backward", "requires_grad", "_spent")

    def __init__(self, value, parents: Sequence["Node"] = (), op: str = "leaf",
                 backward_fn: Callable[[np.ndarray], None] | None = None,
                 requires_grad: bool | None = None):
        self.value = as_matrix(value)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self._spent = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.value.shape})"


def leaf(value, requires_grad: bool = True) -> Node:
    return Node(value, requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


# ---------------------------------------------------------------- operations

def matmul(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Node(a.value @ b.value, (a, b), "matmul")

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    out._backward = back
    return out


def transpose(a: Node) -> Node:
    out = Node(a.value.T.copy(), (a,), "transpose")
    out._backward = lambda g: a._accumulate(g.T)
    return out


def add(a: Node, b: Node) -> Node:
    """Elementwise sum with broadcasting of n x 1 / 1 x n / 1 x 1 operands."""
    a, b = _wrap(a), _wrap(b)
    try:
        value = a.value + b.value
    except ValueError:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    out = Node(value, (a, b), "add")

    def back(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = back
    return out


def sub(a: Node, b: Node) -> Node:
    return add(a, scale(_wrap(b), -1.0))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    out = Node(a.value * c, (a,), "scale")
    out._backward = lambda g: a._accumulate(g * c)
    return out


def add_scalar(a: Node, c: float) -> Node:
    out = Node(a.value + float(c), (a,), "add_scalar")
    out._backward = lambda g: a._accumulate(g)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def hstack(nodes: Sequence[Node]) -> Node:
    nodes = [_wrap(n) for n in nodes]
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise DimensionError(f"hstack needs equal row counts, got {[n.shape for n in nodes]}")
    out = Node(np.hstack([n.value for n in nodes]), nodes, "hstack")
    widths = np.cumsum([0] + [n.shape[1] for n in nodes])

    def back(g):
        for n, lo, hi in zip(nodes, widths[:-1], widths[1:]):
            n._accumulate(g[:, lo:hi])

    out._backward = back
    return out


def l2_normalize_columns(a: Node, eps: float = 1e-12) -> Node:
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    x = a.value
    norms = np.sqrt((x * x).sum(axis=0, keepdims=True))
    clipped = norms < eps
    denom = np.where(clipped, eps, norms)
    y = x / denom
    out = Node(y, (a,), "l2_normalize_columns")

    def back(g):
        # d(x/|x|) = (g - y (y.g)) / |x| on unclipped columns, g / eps otherwise
        proj = (y * g).sum(axis=0, keepdims=True)
        gx = np.where(clipped, g / denom, (g - y * proj) / denom)
        a._accumulate(gx)

    out._backward = back
    return out


def row_softmax(a: Node, temperature: float) -> Node:
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    t = float(temperature)
    z = t * a.value
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Node(p, (a,), "row_softmax")

    def back(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        a._accumulate(t * p * (g - inner))

    out._backward = back
    return out


def hinge(a: Node) -> Node:
    x = a.value
    mask = x > 0
    out = Node(np.where(mask, x, 0.0), (a,), "hinge")
    out._backward = lambda g: a._accumulate(g * mask)
    return out


relu = hinge


def abs_(a: Node) -> Node:
    s = np.sign(a.value)
    out = Node(np.abs(a.value), (a,), "abs")
    out._backward = lambda g: a._accumulate(g * s)
    return out


def softplus(a: Node) -> Node:
    x = a.value
    out = Node(np.logaddexp(0.0, x), (a,), "softplus")
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    out._backward = lambda g: a._accumulate(g * sig)
    return out


def sum_all(a: Node) -> Node:
    out = Node(a.value.sum(), (a,), "sum")
    out._backward = lambda g: a._accumulate(np.full(a.shape, g[0, 0]))
    return out


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = Node(a.value.mean(), (a,), "mean")
    out._backward = lambda g: a._accumulate(np.full(a.shape, g[0, 0] / n))
    return out


def masked_sum(a: Node, mask: np.ndarray) -> Node:
    """Sum of the entries of ``a`` where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match {a.shape}")
    out = Node(a.value[mask].sum(), (a,), "masked_sum")
    out._backward = lambda g: a._accumulate(g[0, 0] * mask)
    return out


def diag(a: Node) -> Node:
    """Main diagonal of a square matrix as an n x 1 column."""
    n, m = a.shape
    if n != m:
        raise DimensionError(f"diag needs a square matrix, got {a.shape}")
    out = Node(np.diag(a.value).reshape(-1, 1).copy(), (a,), "diag")

    def back(g):
        ga = np.zeros_like(a.value)
        ga[np.arange(n), np.arange(n)] = g[:, 0]
        a._accumulate(ga)

    out._backward = back
    return out


def row_col_max_excluding_diag(a: Node) -> tuple[Node, Node]:
    """Per-row and per-column off-diagonal maxima, both as n x 1 columns.

    Gradient goes to one winner per row/column: the lowest index among ties.
    """
    n, m = a.shape
    if n != m:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    if n < 2:
        raise DegenerateInputError("off-diagonal maxima need n >= 2")
    masked = a.value.copy()
    idx = np.arange(n)
    masked[idx, idx] = -np.inf
    row_arg = masked.argmax(axis=1)  # argmax returns the first index on ties
    col_arg = masked.argmax(axis=0)
    row_max = Node(masked[idx, row_arg].reshape(-1, 1), (a,), "row_max_offdiag")
    col_max = Node(masked[col_arg, idx].reshape(-1, 1), (a,), "col_max_offdiag")

    def back_row(g):
        ga = np.zeros_like(a.value)
        ga[idx, row_arg] = g[:, 0]
        a._accumulate(ga)

    def back_col(g):
        ga = np.zeros_like(a.value)
        ga[col_arg, idx] = g[:, 0]
        a._accumulate(ga)

    row_max._backward = back_row
    col_max._backward = back_col
    return row_max, col_max


# ------------------------------------------------------------------ backward

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``grad`` on every node reachable from ``loss``.

    Raises GradientStateError if the graph was already differentiated and
    not reset with :func:`zero_grad`.
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"backward needs a 1x1 loss, got {loss.shape}")
    if loss._spent:
        raise GradientStateError("backward already ran on this graph; call zero_grad first")
    order = _topo_order(loss)
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    loss._spent = True


def zero_grad(loss: Node) -> None:
    for node in _topo_order(loss):
        node.grad = None
    loss._spent = False


def leaves(loss: Node) -> list[Node]:
    return [n for n in _topo_order(loss) if not n.parents and n.requires_grad]


# ------------------------------------------------------------ gradient check

def finite_diff_check(f: Callable[[Node], Node], x, h: float = 1e-5,
                      skip: np.ndarray | None = None) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x``
    and central differences.

    ``skip`` marks entries to leave out, e.g. inputs sitting on a kink.
    """
    x = as_matrix(x)
    node = leaf(x.copy())
    out = f(node)
    backward(out)
    analytic = node.grad if node.grad is not None else np.zeros_like(x)
    numeric = np.zeros_like(x)
    probe = x.copy()
    for idx in np.ndindex(*x.shape):
        orig = probe[idx]
        probe[idx] = orig + h
        fp = f(constant(probe)).item()
        probe[idx] = orig - h
        fm = f(constant(probe)).item()
        probe[idx] = orig
        numeric[idx] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    if skip is not None:
        rel = np.where(np.asarray(skip, dtype=bool), 0.0, rel)
    return float(rel.max()) if rel.size else 0.0


def finite_diff_check_params(f: Callable[[], Node], params: Iterable[Node],
                             h: float = 1e-5) -> float:
    """Like :func:`finite_diff_check` but over several leaf nodes that ``f``
    closes over. Parameters are perturbed in place and restored."""
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    backward(out)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        for idx in np.ndindex(*p.shape):
            orig = p.value[idx]
            p.value[idx] = orig + h
            fp = f().item()
            p.value[idx] = orig - h
            fm = f().item()
            p.value[idx] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[idx]
            denom = max(abs(a), abs(num), 1e-8)
            worst = max(worst, abs(a - num) / denom)
    return worst
