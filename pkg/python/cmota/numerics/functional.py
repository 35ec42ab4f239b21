"""Differentiable ops over :class:`~cmota.numerics.tensor.Tensor`.

Broadcasting is limited to what the model needs: elementwise ops broadcast
numpy-style and reduce gradients back to each operand's shape; ``matmul``
accepts stacked leading dimensions.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, fields
from typing import Any

import numpy as np

from cmota.errors import DimensionError, TargetIndexError
from cmota.numerics.tensor import Tensor

logger = logging.getLogger("cmota")


def _tensor(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise ----------------------------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    a = a if isinstance(a, Tensor) else _tensor(a, b)
    b = _tensor(b, a)
    _broadcast_shape(a, b, "add")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Any, b: Any) -> Tensor:
    a = a if isinstance(a, Tensor) else _tensor(a, b)
    b = _tensor(b, a)
    _broadcast_shape(a, b, "sub")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: Any, b: Any) -> Tensor:
    a = a if isinstance(a, Tensor) else _tensor(a, b)
    b = _tensor(b, a)
    _broadcast_shape(a, b, "mul")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b: Any) -> Tensor:
    b = _tensor(b, a)
    _broadcast_shape(a, b, "div")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._from_op(a.data / b.data, (a, b), backward, "div")


def square(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (2.0 * g * x.data,)

    return Tensor._from_op(x.data * x.data, (x,), backward, "square")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (1.0 - y * y),)

    return Tensor._from_op(y, (x,), backward, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form saturates to exact 0/1 instead of overflowing exp
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * y * (1.0 - y),)

    return Tensor._from_op(y, (x,), backward, "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return Tensor._from_op(y, (x,), backward, "gelu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p`` is 0."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * keep,)

    return Tensor._from_op(x.data * keep, (x,), backward, "dropout")


# -- linear algebra and shape -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from exc

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return Tensor._from_op(np.transpose(x.data, axes), (x,), backward, "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat shapes disagree off axis {axis}: {[x.shape for x in xs]}"
        ) from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return Tensor._from_op(out, tuple(xs), backward, "concat")


def index(x: Tensor, key: Any) -> Tensor:
    """Basic/advanced indexing with scatter-add gradient."""
    out = np.array(x.data[key])

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return Tensor._from_op(out, (x,), backward, "index")


def take_rows(table: Tensor, indices: Sequence[int] | np.ndarray) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table``. Only used rows get gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx[(idx < 0) | (idx >= n)][0])
        raise TargetIndexError(f"row index {bad} outside table of {n} rows")

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(table.data[idx], (table,), backward, "take_rows")


def sum(  # noqa: A001
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


# -- normalization ------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    n = x.shape[-1]

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * gamma.data
        dx = (
            inv
            / n
            * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        )
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor._from_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


# -- softmax, attention, losses -----------------------------------------------------------


def masked_softmax(x: Tensor, axis: int = -1, mask: Any = None) -> Tensor:
    """Softmax along ``axis`` over entries where ``mask`` is true.

    Masked entries get exactly 0. A slice with every entry masked falls back
    to uniform weights (constant, no gradient) and logs a warning.
    """
    data = x.data
    if mask is None:
        shifted = data - data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        dead = None
    else:
        try:
            keep = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        except ValueError as exc:
            raise DimensionError(
                f"masked_softmax: mask {np.shape(mask)} not broadcastable to {data.shape}"
            ) from exc
        filled = np.where(keep, data, -np.inf)
        peak = filled.max(axis=axis, keepdims=True)
        dead = ~np.isfinite(peak)
        e = np.exp(filled - np.where(dead, 0.0, peak))
        total = e.sum(axis=axis, keepdims=True)
        y = e / np.where(dead, 1.0, total)
        if dead.any():
            logger.warning(
                "⚠ cmota: masked_softmax got %d fully-masked slice(s); using uniform weights",
                int(dead.sum()),
            )
            y = np.where(dead, 1.0 / data.shape[axis], y)
        else:
            dead = None

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        gx = y * (g - (g * y).sum(axis=axis, keepdims=True))
        if dead is not None:
            gx = np.where(dead, 0.0, gx)
        return (gx,)

    return Tensor._from_op(y, (x,), backward, "masked_softmax")


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Any = None,
    *,
    return_weights: bool = False,
) -> Tensor | tuple[Tensor, Tensor]:
    """``softmax(q kᵀ / sqrt(d_q), mask) v`` over the last two axes.

    ``mask[i, j]`` true lets query ``i`` see key ``j``; it broadcasts over any
    leading (head) axes.
    """
    if k.shape[-2] == 0:
        raise DimensionError("attention needs at least one key")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if v.shape[-2] != k.shape[-2]:
        raise DimensionError(f"{v.shape[-2]} value rows for {k.shape[-2]} keys")
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = masked_softmax(scores, axis=-1, mask=mask)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def cross_entropy(
    logits: Tensor, targets: Sequence[int] | np.ndarray, reduction: str = "sum"
) -> Tensor:
    """Negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``reduction`` is ``"sum"`` (per-frame convention), ``"mean"`` or ``"none"``.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n, V] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if t.shape[0] != n:
        raise DimensionError(f"{t.shape[0]} targets for {n} logit rows")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        bad = int(t[(t < 0) | (t >= vocab)][0])
        raise TargetIndexError(f"target {bad} outside vocabulary of {vocab}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    rows = np.arange(n)
    nll = -log_probs[rows, t]
    probs = np.exp(log_probs)

    if reduction == "none":
        out = nll
    elif reduction == "sum":
        out = np.asarray(nll.sum())
    elif reduction == "mean":
        out = np.asarray(nll.mean())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        d = probs.copy()
        d[rows, t] -= 1.0
        if reduction == "none":
            return (d * g[:, None],)
        if reduction == "mean":
            return (d * (g / max(n, 1)),)
        return (d * g,)

    return Tensor._from_op(out.astype(logits.data.dtype), (logits,), backward, "cross_entropy")


# -- recurrent cell -----------------------------------------------------------------------


@dataclass
class GruParams:
    """Weights of one GRU cell; inputs and hidden both have width ``d``."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @property
    def dim(self) -> int:
        return self.w_z.shape[0]

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]

    def validate(self) -> None:
        d = self.dim
        for name in ("w_z", "u_z", "w_r", "u_r", "w_h", "u_h"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"GRU {name} must be {d}x{d}, got {getattr(self, name).shape}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (d,):
                raise DimensionError(f"GRU {name} must have length {d}")

    @classmethod
    def zeros(cls, d: int, dtype: Any = np.float64) -> GruParams:
        return cls(
            *(
                Tensor(np.zeros((d, d) if i % 3 != 2 else (d,)), requires_grad=True, dtype=dtype)
                for i in range(9)
            )
        )

    @classmethod
    def normal(
        cls, d: int, rng: np.random.Generator, std: float, dtype: Any = np.float64
    ) -> GruParams:
        tensors = []
        for i in range(9):
            if i % 3 == 2:
                tensors.append(Tensor(np.zeros(d), requires_grad=True, dtype=dtype))
            else:
                weights = rng.normal(0.0, std, (d, d))
                tensors.append(Tensor(weights, requires_grad=True, dtype=dtype))
        return cls(*tensors)


def gru_cell(x: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """One GRU step with the ``h' = (1 - z) * h + z * h~`` convention."""
    if x.shape != h.shape:
        raise DimensionError(f"GRU input {x.shape} and hidden {h.shape} differ")
    if x.shape[-1] != p.dim:
        raise DimensionError(f"GRU width {p.dim} does not match inputs of width {x.shape[-1]}")
    z = sigmoid(add(add(matmul(x, p.w_z), matmul(h, p.u_z)), p.b_z))
    r = sigmoid(add(add(matmul(x, p.w_r), matmul(h, p.u_r)), p.b_r))
    candidate = tanh(add(add(matmul(x, p.w_h), matmul(mul(r, h), p.u_h)), p.b_h))
    return add(mul(sub(1.0, z), h), mul(z, candidate))
