"""Dense tensors with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that involves at least one input with
``requires_grad=True`` records a node holding its parents and a backward
rule.  :meth:`Tensor.backward` collects the recorded graph in topological
order and walks it in reverse exactly once per call.

Storage width is global: float32 by default, float64 via :func:`precision`
or the ``METAMIX_DTYPE`` environment variable.  Gradient checks need 64-bit.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.dtype(os.environ.get("METAMIX_DTYPE", "float32"))
_GRAD_ENABLED = True


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the storage width, e.g. ``with precision("float64"):``."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation, instrumentation)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional array with an optional gradient slot.

    Args:
        data: anything ``np.asarray`` accepts; cast to the global dtype.
        requires_grad: whether gradients are accumulated into ``grad``.
        name: optional label used in error messages and checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad", "retain_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.retain_grad = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=_DTYPE)
        out.grad = None
        out.retain_grad = False
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, a), -_unbroadcast(g, b)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._from_op(
            x * y, (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._from_op(
            x / y, (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return Tensor._from_op(
            x ** exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),)
        )

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        if x.ndim != 2 or y.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {x.shape} and {y.shape}")
        if x.shape[1] != y.shape[0]:
            raise ValueError(f"matmul inner dimensions differ: {x.shape} @ {y.shape}")
        return Tensor._from_op(x @ y, (self, other), lambda g: (g @ y.T, x.T @ g))

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        dtype = self.data.dtype

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._from_op(self.data[index], (self,), backward)

    # -- reductions and shape -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must hold a single element unless ``grad`` is given.
        Repeated calls on the same graph add up.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones(self.shape, dtype=self.data.dtype)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        Graph(self).run_backward(grad)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Graph:
    """Recorded operations reachable from ``root``, in topological order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def run_backward(self, seed: np.ndarray) -> None:
        cotangents: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = cotangents.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node.retain_grad:
                g_arr = np.asarray(g)
                node.grad = g_arr.copy() if node.grad is None else node.grad + g_arr
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in cotangents:
                    cotangents[key] = cotangents[key] + pg
                else:
                    cotangents[key] = pg


def custom_grad(forward_fn: Callable, backward_fn: Callable) -> Callable[..., Tensor]:
    """Build a differentiable op whose backward rule is supplied explicitly.

    ``forward_fn(*arrays) -> array`` computes the output; ``backward_fn(g,
    *arrays) -> tuple`` maps the output cotangent ``g`` to one cotangent per
    input (``None`` for no gradient).  The forward function is never
    differentiated, which is how straight-through estimators are expressed.
    """

    def op(*inputs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        arrays = tuple(t.data for t in tensors)
        out = np.asarray(forward_fn(*arrays), dtype=_DTYPE)

        def backward(g):
            grads = backward_fn(g, *arrays)
            if not isinstance(grads, (tuple, list)):
                grads = (grads,)
            if len(grads) != len(arrays):
                raise ValueError(
                    f"backward_fn returned {len(grads)} cotangents for {len(arrays)} inputs"
                )
            checked = []
            for i, (gi, a) in enumerate(zip(grads, arrays)):
                if gi is None:
                    checked.append(None)
                    continue
                gi = np.asarray(gi, dtype=a.dtype)
                if gi.shape != a.shape:
                    raise ValueError(
                        f"cotangent {i} has shape {gi.shape}, input has shape {a.shape}"
                    )
                checked.append(gi)
            return tuple(checked)

        return Tensor._from_op(out, tensors, backward)

    return op
