"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every differentiable value is a :class:`Var`. Operations on ``Var`` objects
record their parents and a closure mapping the upstream gradient to the
parents' gradients; :func:`backward` walks that graph once in reverse
topological order.

The primitive set is closed (see ``PRIMITIVES``). Applying any other numpy
ufunc or array function to a ``Var`` raises :class:`UnsupportedOpError`
instead of silently dropping the gradient.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import NumericalError, ShapeError, UnsupportedOpError

PRIMITIVES = frozenset(
    {
        "add", "sub", "mul", "div", "neg", "pow", "square", "exp", "log",
        "relu", "matmul", "sum", "mean", "reshape", "transpose", "getitem",
        "concatenate", "log_softmax", "einsum", "logdet", "clip_min",
    }
)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Var:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("value", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 1000.0

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: tuple["Var", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Var":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __len__(self) -> int:
        return len(self.value)

    # arithmetic dunders
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Var":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Var":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # numpy interop: route supported ufuncs, reject the rest
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            raise UnsupportedOpError(f"unsupported ufunc usage: {ufunc.__name__}.{method}")
        fn = _UFUNCS.get(ufunc)
        if fn is None:
            raise UnsupportedOpError(f"unsupported primitive: {ufunc.__name__}")
        return fn(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        fn = _ARRAY_FUNCTIONS.get(func)
        if fn is None:
            raise UnsupportedOpError(f"unsupported primitive: {func.__name__}")
        return fn(*args, **kwargs)


def leaf(value) -> Var:
    """A trainable leaf that gradients are taken with respect to."""
    return Var(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Var:
    return Var(value)


def stop_gradient(x) -> Var:
    return Var(_val(x))


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _node(value: np.ndarray, parents: tuple[Var, ...], backward_fn: BackwardFn, op: str) -> Var:
    if any(p.requires_grad for p in parents):
        return Var(value, True, parents, backward_fn, op)
    return Var(value, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise ------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _node(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        return (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        )

    return _node(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value / b.value

    def bw(g):
        return (
            _unbroadcast(g / b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), bw, "div")


def neg(a) -> Var:
    a = as_var(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent) -> Var:
    if isinstance(exponent, Var) or np.ndim(exponent) != 0:
        raise UnsupportedOpError("pow supports only a scalar constant exponent")
    a = as_var(a)
    p = float(exponent)
    if p == 2.0:
        return square(a)
    return _node(a.value**p, (a,), lambda g: (g * p * a.value ** (p - 1.0),), "pow")


def square(a) -> Var:
    a = as_var(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Var:
    a = as_var(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def clip_min(a, floor: float) -> Var:
    """Elementwise ``max(a, floor)``; the gradient is zero where the floor is active."""
    a = as_var(a)
    mask = a.value > floor
    return _node(np.where(mask, a.value, floor), (a,), lambda g: (g * mask,), "clip_min")


# linear algebra ---------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-d")
    if av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    if (av.ndim == 1 or bv.ndim == 1) and max(av.ndim, bv.ndim) > 2:
        raise UnsupportedOpError("batched matmul with a 1-d operand")

    def bw(g):
        if av.ndim == 1 and bv.ndim == 1:
            ga, gb = g * bv, g * av
        elif av.ndim == 1:
            ga, gb = bv @ g, np.outer(av, g)
        elif bv.ndim == 1:
            ga, gb = np.outer(g, bv), av.T @ g
        else:
            ga = g @ np.swapaxes(bv, -1, -2)
            gb = np.swapaxes(av, -1, -2) @ g
        return (
            _unbroadcast(ga, av.shape) if a.requires_grad else None,
            _unbroadcast(gb, bv.shape) if b.requires_grad else None,
        )

    return _node(av @ bv, (a, b), bw, "matmul")


def _parse_einsum(subscripts: str, n_operands: int) -> tuple[list[str], str]:
    if "->" not in subscripts or "." in subscripts:
        raise UnsupportedOpError("einsum needs explicit '->' output and no ellipsis")
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n_operands or n_operands not in (1, 2):
        raise UnsupportedOpError("einsum supports one or two operands")
    for s in ins:
        if len(set(s)) != len(s):
            raise UnsupportedOpError("einsum with repeated indices in one operand")
    return ins, out


def _einsum_grad(g, out: str, target: str, target_shape, other: str | None, other_val):
    keep = "".join(c for c in target if c in out or (other is not None and c in other))
    if other is None:
        tmp = np.einsum(f"{out}->{keep}", g)
    else:
        tmp = np.einsum(f"{out},{other}->{keep}", g, other_val)
    if keep == target:
        return tmp
    # indices summed away in the forward pass broadcast back
    shape = [target_shape[i] if c in keep else 1 for i, c in enumerate(target)]
    return np.broadcast_to(tmp.reshape(shape), target_shape).copy()


def einsum(subscripts: str, *operands) -> Var:
    ops = tuple(as_var(o) for o in operands)
    ins, out = _parse_einsum(subscripts, len(ops))
    value = np.einsum(subscripts, *(o.value for o in ops))

    def bw(g):
        grads = []
        for i, o in enumerate(ops):
            if not o.requires_grad:
                grads.append(None)
                continue
            if len(ops) == 1:
                grads.append(_einsum_grad(g, out, ins[0], o.shape, None, None))
            else:
                j = 1 - i
                grads.append(_einsum_grad(g, out, ins[i], o.shape, ins[j], ops[j].value))
        return grads

    return _node(value, ops, bw, "einsum")


def logdet(a) -> Var:
    """Log-determinant of (a batch of) symmetric positive-definite matrices."""
    a = as_var(a)
    try:
        chol = np.linalg.cholesky(a.value)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("matrix is not positive definite") from exc
    value = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)

    def bw(g):
        inv = np.linalg.inv(a.value)
        return (np.asarray(g)[..., None, None] * np.swapaxes(inv, -1, -2),)

    return _node(value, (a,), bw, "logdet")


# reductions and shape ---------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Var:
    a = as_var(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a, idx) -> Var:
    a = as_var(a)
    basic = _is_basic_index(idx)

    def bw(g):
        z = np.zeros_like(a.value)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _node(a.value[idx], (a,), bw, "getitem")


def concatenate(items: Iterable, axis: int = 0) -> Var:
    parts = tuple(as_var(x) for x in items)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return [s if p.requires_grad else None for s, p in zip(np.split(g, sizes, axis=axis), parts)]

    return _node(np.concatenate([p.value for p in parts], axis=axis), parts, bw, "concatenate")


def log_softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


_UFUNCS = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.negative: neg,
    np.exp: exp,
    np.log: log,
    np.square: square,
    np.matmul: matmul,
}

_ARRAY_FUNCTIONS = {
    np.sum: lambda a, axis=None, keepdims=False: sum_(a, axis=axis, keepdims=keepdims),
    np.mean: lambda a, axis=None, keepdims=False: mean(a, axis=axis, keepdims=keepdims),
    np.reshape: lambda a, shape: reshape(a, shape),
    np.transpose: lambda a, axes=None: transpose(a, axes),
    np.concatenate: lambda items, axis=0: concatenate(items, axis=axis),
    np.einsum: einsum,
}


# reverse sweep ----------------------------------------------------------


def _topological(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, cotangent=None) -> dict[int, np.ndarray]:
    """One reverse sweep from ``root``; returns gradients keyed by ``id(node)``."""
    if cotangent is None:
        if root.value.size != 1:
            raise ShapeError("backward without a cotangent needs a scalar root")
        cotangent = np.ones_like(root.value)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(cotangent, dtype=np.float64)}
    if not root.requires_grad:
        return grads
    for node in reversed(_topological(root)):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def grad(loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to each leaf in ``wrt``."""
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ShapeError("grad expects a scalar Var loss")
    if not np.isfinite(loss.value).all():
        raise NumericalError("loss is not finite")
    grads = backward(loss)
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


def value_and_grad(fn: Callable[..., Var], *arrays) -> tuple[float, list[np.ndarray]]:
    leaves = [leaf(a) for a in arrays]
    loss = fn(*leaves)
    return float(loss.value), grad(loss, leaves)
