"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation records its parents and a closure that pushes the output
gradient back to them. ``backward`` walks the graph in reverse topological
order. Broadcasting follows numpy; gradients are summed back down to the
parent's shape.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return self.transpose()

    def item(self) -> float:
        return float(self.data)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.data.dtype)
        out = _node(self.data + other.data, (self, other))

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        out._backward = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other, self.data.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.data.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.data.dtype)
        out = _node(self.data * other.data, (self, other))

        def backward(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.data.dtype)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return as_tensor(other, self.data.dtype) * self ** -1.0

    def __pow__(self, exponent: float):
        base = self.data
        out = _node(base ** exponent, (self,))
        out._backward = lambda g: (g * exponent * base ** (exponent - 1.0),)
        return out

    def __matmul__(self, other):
        other = as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        out = _node(a @ b, (self, other))

        def backward(g):
            if b.ndim == 1:
                ga = np.multiply.outer(g, b)
                gb = np.tensordot(a, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
                return ga, gb
            if a.ndim == 1:
                ga = g @ np.swapaxes(b, -1, -2)
                gb = np.multiply.outer(a, g)
                return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        out._backward = backward
        return out

    # -- elementwise ------------------------------------------------------

    def exp(self):
        value = np.exp(self.data)
        out = _node(value, (self,))
        out._backward = lambda g: (g * value,)
        return out

    def log(self):
        x = self.data
        out = _node(np.log(x), (self,))
        out._backward = lambda g: (g / x,)
        return out

    def tanh(self):
        value = np.tanh(self.data)
        out = _node(value, (self,))
        out._backward = lambda g: (g * (1.0 - value * value),)
        return out

    def sigmoid(self):
        value = _sigmoid(self.data)
        out = _node(value, (self,))
        out._backward = lambda g: (g * value * (1.0 - value),)
        return out

    def log_sigmoid(self):
        """Numerically stable ``log(sigmoid(x))``."""
        x = self.data
        value = -np.logaddexp(0.0, -x)
        out = _node(value, (self,))
        out._backward = lambda g: (g * _sigmoid(-x),)
        return out

    def relu(self):
        mask = self.data > 0
        out = _node(self.data * mask, (self,))
        out._backward = lambda g: (g * mask,)
        return out

    # -- reductions and shape ---------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        old = self.shape
        out = _node(self.data.reshape(*shape), (self,))
        out._backward = lambda g: (g.reshape(old),)
        return out

    def transpose(self, *axes):
        axes = axes or None
        out = _node(np.transpose(self.data, axes), (self,))
        inverse = None if axes is None else np.argsort(axes)
        out._backward = lambda g: (np.transpose(g, inverse),)
        return out

    def swapaxes(self, a, b):
        out = _node(np.swapaxes(self.data, a, b), (self,))
        out._backward = lambda g: (np.swapaxes(g, a, b),)
        return out

    def __getitem__(self, index):
        shape = self.shape
        out = _node(self.data[index], (self,))

        fancy = any(isinstance(i, (np.ndarray, list)) for i in
                    (index if isinstance(index, tuple) else (index,)))
        # flat source position of every output element, for scatter-adding
        flat = np.arange(self.data.size).reshape(shape)[index].ravel() if fancy else None

        def backward(g):
            if fancy:
                summed = np.bincount(flat, weights=g.ravel(), minlength=int(np.prod(shape)))
                return (summed.reshape(shape).astype(g.dtype, copy=False),)
            full = np.zeros(shape, dtype=g.dtype)
            full[index] = g
            return (full,)

        out._backward = backward
        return out

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        value = e / e.sum(axis=axis, keepdims=True)
        out = _node(value, (self,))

        def backward(g):
            return (value * (g - (g * value).sum(axis=axis, keepdims=True)),)

        out._backward = backward
        return out

    # -- graph ------------------------------------------------------------

    def backward(self, grad=None):
        backward(self, grad)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def _node(data, parents) -> Tensor:
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents), parents=parents)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(array: np.ndarray, name: str | None = None) -> Tensor:
    """Wrap an array as a differentiable leaf."""
    return Tensor(array, requires_grad=True, name=name)


def take(table: Tensor, index) -> Tensor:
    """Row gather ``table[index]``; the backward pass scatter-adds into the table."""
    index = np.asarray(index)
    shape = table.shape
    out = _node(table.data[index], (table,))

    row = int(np.prod(shape[1:]))
    flat = (index.reshape(-1, 1) * row + np.arange(row)).ravel()

    def backward(g):
        summed = np.bincount(flat, weights=g.ravel(), minlength=shape[0] * row)
        return (summed.reshape(shape).astype(g.dtype, copy=False),)

    out._backward = backward
    return out


def stack(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors))

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    out._backward = backward
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    out._backward = backward
    return out


def where(condition, a, b) -> Tensor:
    """Select ``a`` where ``condition`` holds, else ``b``. ``condition`` is constant."""
    condition = np.asarray(condition)
    a, b = as_tensor(a), as_tensor(b)
    out = _node(np.where(condition, a.data, b.data), (a, b))

    def backward(g):
        return (_unbroadcast(np.where(condition, g, 0.0), a.shape),
                _unbroadcast(np.where(condition, 0.0, g), b.shape))

    out._backward = backward
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every differentiable leaf."""
    if not np.all(np.isfinite(root.data)):
        raise NumericError("cannot differentiate a non-finite value")
    if grad is None:
        grad = np.ones_like(root.data, dtype=root.data.dtype)
    grads = {id(root): np.asarray(grad)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
