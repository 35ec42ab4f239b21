"""Dense tensors with a reverse-mode gradient graph.

A ``Tensor`` wraps a numpy array. Ops in :mod:`cmota.numerics.functional`
produce new tensors and, when gradients are enabled and any input requires
them, record a backward closure returning one gradient per parent.

Tensors produced by ops are never mutated. Leaf parameters get their
``data`` replaced by the optimizer, which leaves already-built graphs intact.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections.abc import Callable, Iterator, Sequence
from typing import Any

import numpy as np

from cmota.errors import DimensionError, NumericalError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "cmota_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block; results are detached constants."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def _as_float_array(data: Any, dtype: Any = None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.array(arr, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float64)
    return np.array(arr)


class Tensor:
    """A dense array plus the bookkeeping reverse-mode differentiation needs."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None) -> None:
        self.data: np.ndarray = _as_float_array(data, dtype)
        self.requires_grad: bool = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- construction used by ops -------------------------------------------------

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence[Tensor],
        backward: BackwardFn,
        op: str,
    ) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NumericalError(
                op,
                "produced non-finite values",
                {"shape": tuple(data.shape), "parents": [p.op for p in parents]},
            )
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        requires = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = requires
        out._parents = tuple(parents) if requires else ()
        out._backward = backward if requires else None
        return out

    # -- metadata -----------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r}{flag})"

    # -- differentiation ----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grads, order = _backprop(self, np.asarray(grad, dtype=self.data.dtype))
        for node in order:
            if node.is_leaf and node.requires_grad and id(node) in grads:
                g = grads[id(node)]
                node.grad = g.copy() if node.grad is None else node.grad + g

    # -- operators ----------------------------------------------------------------

    def __add__(self, other: Any) -> Tensor:
        from cmota.numerics import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> Tensor:
        from cmota.numerics import functional as F

        return F.sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        from cmota.numerics import functional as F

        return F.sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        from cmota.numerics import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> Tensor:
        from cmota.numerics import functional as F

        return F.div(self, other)

    def __neg__(self) -> Tensor:
        from cmota.numerics import functional as F

        return F.mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        from cmota.numerics import functional as F

        return F.matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        from cmota.numerics import functional as F

        return F.index(self, key)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _backprop(root: Tensor, seed: np.ndarray) -> tuple[dict[int, np.ndarray], list[Tensor]]:
    """Propagate ``seed`` from ``root`` to all ancestors in reverse topological order."""
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        if not node.is_leaf:
            del grads[id(node)]
    return grads, order


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(output)/d(input) for each input without touching ``.grad``.

    Inputs the output does not depend on get zeros. Independent graphs may be
    differentiated concurrently through this function.
    """
    if output.data.size != 1:
        raise DimensionError(f"grad() needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return [np.zeros_like(t.data) for t in inputs]
    grads, _ = _backprop(output, np.ones_like(output.data))
    return [grads[id(t)] if id(t) in grads else np.zeros_like(t.data) for t in inputs]
