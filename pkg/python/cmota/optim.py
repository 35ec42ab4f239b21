"""AdamW with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from cmota._config import TrainConfig
from cmota.errors import DimensionError, NumericalError
from cmota.numerics.tensor import Tensor


@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> AdamWState:
        return cls(
            step=0,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    config: TrainConfig,
    lr: float | None = None,
) -> AdamWState:
    """One AdamW update in place on ``params[i].data`` and ``state``.

    Decay is applied first (``p *= 1 - lr * wd``), then the bias-corrected
    Adam step. Nothing is written unless every updated value is finite.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError(
            f"adamw_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moments"
        )
    lr = config.effective_lr if lr is None else lr
    b1, b2, eps, wd = config.beta1, config.beta2, config.eps, config.weight_decay
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    updates = []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(
                f"adamw_step: param {i} is {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape}"
            )
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        decayed = p.data * (1.0 - lr * wd)
        p_new = decayed - lr * (m_new / c1) / (np.sqrt(v_new / c2) + eps)
        if not np.all(np.isfinite(p_new)):
            raise NumericalError("adamw_step", f"non-finite update for parameter {i}", {"step": t})
        updates.append((p_new.astype(p.data.dtype), m_new.astype(m.dtype), v_new.astype(v.dtype)))

    for i, (p, (p_new, m_new, v_new)) in enumerate(zip(params, updates)):
        p.data = p_new
        state.m[i] = m_new
        state.v[i] = v_new
    state.step = t
    return state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return list(grads), norm
    scale = max_norm / (norm + 1e-6)
    return [g * scale for g in grads], norm
