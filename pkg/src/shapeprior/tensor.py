"""Minimal reverse-mode autodiff on numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` together with an optional gradient
buffer and a closure that knows how to push gradients to its parents. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in reverse
topological order.

Conventions
-----------
* Gradients accumulate into ``.grad`` with ``+=`` semantics. Leaf gradients
  survive across ``backward`` calls until ``zero_grad`` is invoked, so two
  separate backward passes add up exactly like one pass over the summed loss.
  Interior node gradients are reset at the start of every backward pass.
* Ops never mutate their inputs. ``data`` buffers are treated as frozen once
  a node has been used as a parent.
* dtype follows numpy promotion of the inputs; float32 throughout a model
  stays float32 (python scalars do not upcast under NEP 50 rules).
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind not in "fc":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad and grad_enabled():
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = out.requires_grad and grad_enabled()
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
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same buffer that blocks gradient flow."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy so later += never aliases an op's scratch buffer
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- graph traversal ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep seeded with d(self)/d(self) = 1.

        ``self`` must hold a single element. Every node in the recorded
        graph is visited exactly once; interior gradients are cleared first
        so repeated sweeps never double-count through shared subgraphs.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar, got shape {self.data.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- arithmetic -----------------------------------------------------------

    @staticmethod
    def _coerce(other, like: "Tensor") -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=like.data.dtype))

    def __add__(self, other):
        other = Tensor._coerce(other, self)
        out = Tensor._result(self.data + other.data, (self, other), None)

        def backward():
            g = out.grad
            if self.requires_grad:
                self.accumulate_grad(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other.accumulate_grad(_unbroadcast(g, other.data.shape))

        out._backward = backward if out._parents else None
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        out = Tensor._result(self.data * other.data, (self, other), None)

        def backward():
            g = out.grad
            if self.requires_grad:
                self.accumulate_grad(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other.accumulate_grad(_unbroadcast(g * self.data, other.data.shape))

        out._backward = backward if out._parents else None
        return out

    __rmul__ = __mul__

    def __neg__(self):
        out = Tensor._result(-self.data, (self,), None)

        def backward():
            self.accumulate_grad(-out.grad)

        out._backward = backward if out._parents else None
        return out

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        out = Tensor._result(self.data - other.data, (self, other), None)

        def backward():
            g = out.grad
            if self.requires_grad:
                self.accumulate_grad(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other.accumulate_grad(_unbroadcast(-g, other.data.shape))

        out._backward = backward if out._parents else None
        return out

    def __rsub__(self, other):
        return Tensor._coerce(other, self) - self

    def __truediv__(self, other):
        other = Tensor._coerce(other, self)
        out = Tensor._result(self.data / other.data, (self, other), None)

        def backward():
            g = out.grad
            if self.requires_grad:
                self.accumulate_grad(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other.accumulate_grad(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                )

        out._backward = backward if out._parents else None
        return out

    def __rtruediv__(self, other):
        return Tensor._coerce(other, self) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = Tensor._result(self.data ** p, (self,), None)

        def backward():
            self.accumulate_grad(out.grad * p * self.data ** (p - 1))

        out._backward = backward if out._parents else None
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise functions ------------------------------------------------

    def exp(self):
        out = Tensor._result(np.exp(self.data), (self,), None)

        def backward():
            self.accumulate_grad(out.grad * out.data)

        out._backward = backward if out._parents else None
        return out

    def log(self):
        out = Tensor._result(np.log(self.data), (self,), None)

        def backward():
            self.accumulate_grad(out.grad / self.data)

        out._backward = backward if out._parents else None
        return out

    def tanh(self):
        out = Tensor._result(np.tanh(self.data), (self,), None)

        def backward():
            self.accumulate_grad(out.grad * (1.0 - out.data * out.data))

        out._backward = backward if out._parents else None
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), None)

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accumulate_grad(np.broadcast_to(g, self.data.shape).astype(self.data.dtype))

        out._backward = backward if out._parents else None
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        out = Tensor._result(self.data.mean(axis=axis, keepdims=keepdims), (self,), None)

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accumulate_grad(
                (np.broadcast_to(g, self.data.shape) / n).astype(self.data.dtype)
            )

        out._backward = backward if out._parents else None
        return out

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = Tensor._result(self.data.reshape(shape), (self,), None)

        def backward():
            self.accumulate_grad(out.grad.reshape(old))

        out._backward = backward if out._parents else None
        return out

    def t(self):
        """2-D transpose."""
        if self.data.ndim != 2:
            raise ValueError("t() expects a 2-D tensor")
        out = Tensor._result(np.ascontiguousarray(self.data.T), (self,), None)

        def backward():
            self.accumulate_grad(np.ascontiguousarray(out.grad.T))

        out._backward = backward if out._parents else None
        return out


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a Tensor with an explicit dtype (float32 unless stated)."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product ``(M,K) @ (K,P)``."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor._result(a.data @ b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    out._backward = backward if out._parents else None
    return out


def concat(tensors: list[Tensor] | tuple[Tensor, ...], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat of nothing")
    out = Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, None
    )
    sizes = [t.data.shape[axis] for t in tensors]

    def backward():
        g = out.grad
        start = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + n)
                t.accumulate_grad(g[tuple(idx)])
            start += n

    out._backward = backward if out._parents else None
    return out


# -- gradient gating ---------------------------------------------------------

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Context manager that skips graph recording (forward-only inference)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False
