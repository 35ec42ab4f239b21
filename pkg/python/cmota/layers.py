"""Transformer building blocks on top of :mod:`cmota.numerics`."""

from __future__ import annotations

from typing import Any

import numpy as np

from cmota.errors import DimensionError
from cmota.numerics import functional as F
from cmota.numerics.module import Module
from cmota.numerics.tensor import Tensor


def _param(values: np.ndarray, dtype: Any) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=dtype)


class Linear(Module):
    """``x @ weight + bias`` with weight stored as ``[d_in, d_out]``."""

    def __init__(
        self, d_in: int, d_out: int, rng: np.random.Generator, std: float, dtype: Any
    ) -> None:
        self.weight = _param(rng.normal(0.0, std, (d_in, d_out)), dtype)
        self.bias = _param(np.zeros(d_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.add(F.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype: Any) -> None:
        self.gamma = _param(np.ones(d), dtype)
        self.beta = _param(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float, dtype: Any) -> None:
        self.table = _param(rng.normal(0.0, std, (n, d)), dtype)

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def __call__(self, indices: Any) -> Tensor:
        return F.take_rows(self.table, indices)


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng: np.random.Generator, std: float, dtype: Any) -> None:
        self.up = Linear(d, mult * d, rng, std, dtype)
        self.down = Linear(mult * d, d, rng, std, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(F.gelu(self.up(x)))


class MultiHeadAttention(Module):
    """Projected multi-head attention; queries and keys may come from different inputs.

    ``mask`` is ``[T_q, T_k]`` (true = visible) and is shared by all heads.
    When ``capture`` is a list, the ``[heads, T_q, T_k]`` weights are appended
    to it as a numpy array.
    """

    def __init__(
        self, d: int, heads: int, rng: np.random.Generator, std: float, dtype: Any
    ) -> None:
        if d % heads:
            raise DimensionError(f"hidden size {d} is not divisible by {heads} heads")
        self._heads = heads
        self.query = Linear(d, d, rng, std, dtype)
        self.key = Linear(d, d, rng, std, dtype)
        self.value = Linear(d, d, rng, std, dtype)
        self.out = Linear(d, d, rng, std, dtype)

    @property
    def heads(self) -> int:
        return self._heads

    def _split(self, x: Tensor) -> Tensor:
        t, d = x.shape
        return F.transpose(F.reshape(x, (t, self._heads, d // self._heads)), (1, 0, 2))

    def __call__(
        self,
        x_q: Tensor,
        x_kv: Tensor,
        mask: np.ndarray | None = None,
        capture: list[np.ndarray] | None = None,
    ) -> Tensor:
        if x_q.shape[-1] != x_kv.shape[-1]:
            raise DimensionError(f"query width {x_q.shape[-1]} != key width {x_kv.shape[-1]}")
        q = self._split(self.query(x_q))
        k = self._split(self.key(x_kv))
        v = self._split(self.value(x_kv))
        out, weights = F.attention(q, k, v, mask, return_weights=True)
        if capture is not None:
            capture.append(weights.data.copy())
        t_q = x_q.shape[0]
        merged = F.reshape(F.transpose(out, (1, 0, 2)), (t_q, x_q.shape[-1]))
        return self.out(merged)


def attention_parameter_count(d: int) -> int:
    return 4 * d * d + 4 * d
