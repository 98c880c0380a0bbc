"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node on a dynamic tape: the output keeps
references to its parents and a backward rule mapping the output gradient to one
gradient per parent. `backward()` walks the tape in reverse topological order.
The graph is rebuilt on every forward pass, so the number of executed steps may
vary between datapoints.

Storage is NumPy float64 throughout.
"""

from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> Tuple[int, ...]:
    """
    Result shape under the limited broadcasting rules.

    Allowed: equal shapes, scalar with anything, one shape a trailing suffix of the
    other (bias rows), and equal-rank shapes whose mismatched axes have extent 1.
    """
    if a == b:
        return a
    if int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return tuple(max(x, y) for x, y in zip(a, b))
    raise ShapeError(f"{op}: cannot combine shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """
    An n-dimensional float64 array that can take part in a differentiation graph.

    Leaves created with requires_grad=True accumulate `.grad` across backward calls
    until `zero_grad()` is called. Intermediate results never store gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    # ndarray (op) Tensor defers to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "",
    ):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # ------------------------------------------------------------------
    # Construction helpers
    # ------------------------------------------------------------------

    @staticmethod
    def from_op(
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        """
        Register a custom differentiable operation.

        Args:
            data: forward value
            parents: input tensors
            backward: maps the output gradient to a gradient (or None) per parent
            op: name shown in reprs and error messages

        Returns:
            Output tensor; it tracks parents only when one of them needs a gradient
        """
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, backward, op)
        return Tensor(data, op=op)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------
    # Elementwise arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def square(self) -> "Tensor":
        return square(self)

    def softplus(self) -> "Tensor":
        return softplus(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    # ------------------------------------------------------------------
    # Reverse mode
    # ------------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Propagate d(self)/d(leaf) into every reachable leaf that requires a gradient.

        Args:
            grad: seed gradient; only allowed to be omitted for scalar tensors

        Raises:
            ShapeError: when called on a non-scalar tensor without a seed
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = _as_array(grad)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node.is_leaf:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._backward(node_grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    """Iterative post-order DFS over nodes that require gradients."""
    order: List[Tensor] = []
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    return value if isinstance(value, Tensor) else Tensor(value)


def stop_gradient(x) -> Tensor:
    """Same values as `x`; no gradient flows back through the result."""
    x = as_tensor(x)
    return Tensor(x.data, op="stop_gradient")


# ----------------------------------------------------------------------
# Binary elementwise ops
# ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    return Tensor.from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    out = a.data / b.data
    return Tensor.from_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
        "div",
    )


# ----------------------------------------------------------------------
# Unary elementwise ops
# ----------------------------------------------------------------------


def neg(x) -> Tensor:
    x = as_tensor(x)
    return Tensor.from_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return Tensor.from_op(x.data * active, (x,), lambda g: (g * active,), "relu")


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor.from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def softplus(x) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = as_tensor(x)
    return Tensor.from_op(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),), "softplus")


def sin(x) -> Tensor:
    x = as_tensor(x)
    return Tensor.from_op(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x) -> Tensor:
    x = as_tensor(x)
    return Tensor.from_op(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def atan2(y, x) -> Tensor:
    """Angle of the vector (x, y); gradient undefined only at the origin."""
    y, x = as_tensor(y), as_tensor(x)
    _broadcast_shape(y.shape, x.shape, "atan2")
    r2 = np.square(y.data) + np.square(x.data)
    return Tensor.from_op(
        np.arctan2(y.data, x.data),
        (y, x),
        lambda g: (_unbroadcast(g * x.data / r2, y.shape), _unbroadcast(-g * y.data / r2, x.shape)),
        "atan2",
    )


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "square": square,
    "sin": sin,
    "cos": cos,
    "atan2": atan2,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of the named elementwise ops (add, sub, mul, exp, log, ...)."""
    if op not in ELEMENTWISE:
        raise ValueError(f"unknown elementwise op '{op}'")
    return ELEMENTWISE[op](*args)


# ----------------------------------------------------------------------
# Linear algebra and reductions
# ----------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """[m x k] @ [k x n] -> [m x n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return Tensor.from_op(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.shape}")
    return Tensor.from_op(x.data.T, (x,), lambda g: (g.T,), "transpose")


def tsum(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(out, (x,), backward, "sum")


def tmean(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(out, tensors, backward, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(out, tensors, backward, "stack")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = x.data - logsumexp(x.data, axis=axis, keepdims=True)
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


# ----------------------------------------------------------------------
# Parameters and gradient checking
# ----------------------------------------------------------------------


class Parameter(Tensor):
    """A named leaf tensor that the optimizer updates."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name='{self.name}', shape={self.shape})"


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    floor: float = 1e-8,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare reverse-mode gradients of a scalar function with central differences.

    Args:
        f: maps x to a scalar Tensor
        x: leaf tensor with requires_grad=True (perturbed in place, then restored)
        eps: finite-difference half step
        floor: lower bound of the relative-error denominator
        max_entries: check only a random subset of this many entries
        rng: generator used to pick the subset

    Returns:
        Maximum componentwise relative error |a - n| / max(|a|, |n|, floor)
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not x.requires_grad:
        raise ValueError("grad_check needs a tensor with requires_grad=True")
    if not x.data.flags.c_contiguous or not x.data.flags.writeable:
        x.data = np.array(x.data, dtype=np.float64)

    saved = x.grad
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved

    flat_indices = np.arange(x.size)
    if max_entries is not None and max_entries < x.size:
        rng = rng or np.random.default_rng(0)
        flat_indices = rng.choice(x.size, size=max_entries, replace=False)

    worst = 0.0
    flat = x.data.reshape(-1)
    for i in flat_indices:
        original = flat[i]
        flat[i] = original + eps
        upper = f(x).item()
        flat[i] = original - eps
        lower = f(x).item()
        flat[i] = original
        numeric = (upper - lower) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, error)
    return worst
