"""Dense float64 tensors with reverse-mode differentiation, plus AdaGrad.

Every operation records its inputs and a closure that maps the output
gradient back onto them. ``Tensor.backward`` orders the recorded graph
(the tape) so each node is visited only after all of its consumers, then
runs the closures.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an operation's domain."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that were introduced or stretched by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense array of doubles, optionally tracking its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make ndarray operators defer to Tensor's reflected methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape)
        # never update in place: the incoming array may be shared with a sibling
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"implicit gradient needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = build_tape(self)
        # interior nodes hold transient gradients; clear them before reuse
        for node in tape:
            if node._backward is not None:
                node.grad = None
        self._accumulate(_as_array(grad))
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(ensure_tensor(other)))

    def __rsub__(self, other):
        return add(ensure_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mul(tsum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def ensure_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically order the graph below ``root``; parents come first.

    Iterative so deep graphs do not hit the recursion limit.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=tuple(parents) if requires else (), op=op)
    if requires:
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(data, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _result(-a.data, (a,), "neg", backward)


def mul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(data, (a, b), "mul", backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)

    def backward(g):
        a._accumulate(g * s * (1.0 - s))

    return _result(s, (a,), "sigmoid", backward)


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without underflow for large negative x."""
    x = a.data
    data = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        a._accumulate(g * _stable_sigmoid(-x))

    return _result(data, (a,), "log_sigmoid", backward)


def relu(a: Tensor) -> Tensor:
    active = a.data > 0

    def backward(g):
        a._accumulate(g * active)

    return _result(a.data * active, (a,), "relu", backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min()!r})")

    def backward(g):
        a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), "log", backward)


def tabs(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), "abs", backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a._accumulate(g * inside)

    return _result(np.clip(a.data, lo, hi), (a,), "clip", backward)


# ---------------------------------------------------------------------------
# shape and reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(data, (a,), "sum", backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(data, (a,), "reshape", backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), "transpose", backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accumulate(piece)

    return _result(data, tensors, "concat", backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules over leading axes."""
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: fold the batch axes into one product
                k = a.shape[-1]
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(data, (a, b), "matmul", backward)


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; the result has shape ids.shape + (d,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"lookup id out of range for table with {table.shape[0]} rows")

    def backward(g):
        if table.requires_grad:
            flat = ids.reshape(-1)
            rows = g.reshape(-1, table.shape[1])
            # one-hot (vocab x n) sparse matrix times the row gradients
            onehot = sparse.csc_matrix((np.ones(flat.size), flat, np.arange(flat.size + 1)),
                                       shape=(table.shape[0], flat.size))
            full = np.asarray(onehot @ rows)
            table._accumulate(full)

    return _result(table.data[ids], (table,), "gather", backward)


# ---------------------------------------------------------------------------
# softmax


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (a,), "softmax", backward)


def masked_softmax(a: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax where ``mask == False`` positions act as -inf logits.

    A slice with no valid position yields all-zero weights.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    x = np.where(mask, a.data, -np.inf)
    peak = x.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(mask, np.exp(np.where(mask, a.data, 0.0) - peak), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    s = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def backward(g):
        a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (a,), "masked_softmax", backward)


# ---------------------------------------------------------------------------
# optimisation


class AdaGrad:
    """Per-coordinate AdaGrad.

    ``acc += g**2``; ``p -= lr_t * g / (sqrt(acc) + eps)`` with
    ``lr_t = lr * decay**t``. ``decay=1.0`` leaves only the accumulator's
    own step-size shrinkage.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.001, eps: float = 1e-8,
                 decay: float = 1.0, initial_accumulator: float = 0.0):
        if lr <= 0 or eps < 0 or not 0 < decay <= 1:
            raise ValueError(f"invalid AdaGrad settings lr={lr}, eps={eps}, decay={decay}")
        self.params = dict(params)
        self.lr = lr
        self.eps = eps
        self.decay = decay
        self.steps = 0
        self.accumulators = {name: np.full_like(p.data, initial_accumulator)
                             for name, p in self.params.items()}

    def current_lr(self) -> float:
        return self.lr * self.decay ** self.steps

    def step(self, grads: Mapping[str, np.ndarray] | None = None,
             only: Iterable[str] | None = None) -> None:
        """Apply one update from ``grads`` (defaults to each param's ``.grad``)."""
        lr = self.current_lr()
        names = list(only) if only is not None else list(self.params)
        for name in names:
            p = self.params[name]
            g = grads.get(name) if grads is not None else p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
            acc = self.accumulators[name]
            acc += g * g
            p.data -= lr * g / (np.sqrt(acc) + self.eps)
        self.steps += 1

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def numerical_gradient(fn: Callable[[], float], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param`` (in place)."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    num = np.abs(analytic - numeric)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((num / den).max()) if num.size else 0.0
