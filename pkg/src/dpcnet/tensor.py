"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation is a
:class:`Function` subclass; calling ``SomeFunction.apply(...)`` runs the
forward pass and, when any input requires a gradient, links the output to its
inputs so that :func:`backward` can walk the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Type

import numpy as np

DTYPES = (np.float32, np.float64)

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_fn", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._fn: Optional[Function] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        for leaf, g in _run_backward(self).items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the ops module registers the implementations.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul_broadcast(self, other)

    def __rmul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul_broadcast(other, self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class Function:
    """Base class for a differentiable operation.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning one
    gradient array (or ``None``) per tensor input. Non-tensor keyword arguments
    are forwarded unchanged. Subclasses are registered by ``name`` so that the
    gradient-check suite can verify it covers every operation.
    """

    name: str = ""
    registry: Dict[str, Type["Function"]] = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.name:
            if cls.name in Function.registry:
                raise ValueError(f"duplicate op name {cls.name!r}")
            Function.registry[cls.name] = cls

    def __init__(self):
        self.inputs: Tuple[Tensor, ...] = ()

    def forward(self, *args: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        for t in inputs:
            if not isinstance(t, Tensor):
                raise TypeError(f"{cls.name}: expected Tensor inputs, got {type(t).__name__}")
        fn = cls()
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{cls.name}: non-finite value in forward output")
        res = Tensor(out)
        if grad_enabled() and any(t.requires_grad for t in inputs):
            fn.inputs = inputs
            res.requires_grad = True
            res._fn = fn
        return res


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._fn is not None:
            for parent in node._fn.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _run_backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._fn is None:
            leaves[node] = g
            continue
        in_grads = node._fn.backward(g)
        for parent, pg in zip(node._fn.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"{node._fn.name}: gradient shape {pg.shape} does not match input {parent.shape}"
                )
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def backward(loss: Tensor, params: Iterable[Tensor]) -> List[np.ndarray]:
    """Return d(loss)/d(p) for every ``p`` in ``params``.

    Parameters the loss does not depend on get an all-zero gradient. Nothing is
    written to ``.grad``.
    """
    params = list(params)
    found = _run_backward(loss)
    return [found[p] if p in found else np.zeros_like(p.data) for p in params]
