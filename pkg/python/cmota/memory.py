"""Context memory carried across the frames of one story.

At every fusion layer ``l`` a :class:`MemoryPath` keeps a memory ``M_t`` of
``T_M`` slots:

1. ``summarize``: the previous memory attends over the layer's input
   hidden state, text positions only.
2. ``update``: a GRU cell folds the summary into the memory.
3. ``attentive_weight``: from frame 3 on, the latest memory attends over
   all older memories; latest and weighted memories form the bundle.
4. ``fuse``: the layer's hidden state attends over itself plus the bundle.

Frame 1 has no bundle, frame 2 uses ``M_1`` alone.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from cmota._config import ModelConfig
from cmota.errors import DimensionError, MemoryBankError
from cmota.layers import LayerNorm, MultiHeadAttention, attention_parameter_count
from cmota.numerics import functional as F
from cmota.numerics.functional import GruParams, gru_cell
from cmota.numerics.module import Module
from cmota.numerics.tensor import Tensor

if TYPE_CHECKING:
    from cmota.model import HiddenState

logger = logging.getLogger("cmota")

TEXT_TAG = "txt"
IMAGE_TAG = "img"


@dataclass(frozen=True)
class MemoryState:
    """``M_t`` (``[T_M, d]``) after ``t`` frames; ``t == 0`` is the learned initial memory."""

    memory: Tensor
    t: int


@dataclass
class MemoryBank:
    """Append-only history ``M_1 .. M_{t-1}`` of one story."""

    states: list[MemoryState] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    def append(self, state: MemoryState) -> None:
        if self.states and state.t <= self.states[-1].t:
            raise MemoryBankError(f"memory timestep {state.t} after {self.states[-1].t}")
        self.states.append(state)

    def at(self, t: int) -> MemoryState:
        """``M_t`` for ``t >= 1``."""
        for state in self.states:
            if state.t == t:
                return state
        raise MemoryBankError(f"memory bank holds no M_{t}")


def build_memory_mask(modalities: Sequence[str]) -> np.ndarray:
    """Boolean mask over positions, true exactly at text-tagged ones."""
    unknown = {m for m in modalities if m not in (TEXT_TAG, IMAGE_TAG)}
    if unknown:
        raise ValueError(f"unknown modality tags {sorted(unknown)}")
    return np.array([m == TEXT_TAG for m in modalities], dtype=bool)


def apply_topology(config: ModelConfig) -> frozenset[int]:
    """1-based indices of the layers that carry a memory path."""
    if config.topology == "none":
        return frozenset()
    if config.topology == "all_level":
        return frozenset(range(1, config.layers + 1))
    return frozenset({config.layers})


def memory_path_parameter_count(config: ModelConfig) -> int:
    d = config.hidden
    count = config.memory_slots * d  # initial memory
    count += attention_parameter_count(d)  # summarize
    count += 6 * d * d + 3 * d  # GRU
    count += attention_parameter_count(d) + 2 * d  # fuse + its norm
    if config.awm_enabled:
        count += attention_parameter_count(d)
    return count


class MemoryPath(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype: Any) -> None:
        d, std = config.hidden, config.init_std
        heads = 1 if config.memory_single_head else config.heads
        self._slots = config.memory_slots
        self._awm = config.awm_enabled
        self.init_memory = Tensor(
            rng.normal(0.0, std, (config.memory_slots, d)), requires_grad=True, dtype=dtype
        )
        self.summarize_attn = MultiHeadAttention(d, heads, rng, std, dtype)
        self.gru = GruParams.normal(d, rng, std, dtype)
        if config.awm_enabled:
            self.awm_attn = MultiHeadAttention(d, heads, rng, std, dtype)
        self.fuse_attn = MultiHeadAttention(d, heads, rng, std, dtype)
        self.fuse_norm = LayerNorm(d, dtype)

    @property
    def awm_enabled(self) -> bool:
        return self._awm

    def initial_state(self) -> MemoryState:
        return MemoryState(self.init_memory, 0)

    def summarize(
        self,
        m_prev: MemoryState,
        hidden: Tensor,
        mask: np.ndarray,
        capture: list[np.ndarray] | None = None,
    ) -> Tensor:
        """``S_t = Attn(M_{t-1}, H, H)`` with image positions masked out."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (hidden.shape[0],):
            raise DimensionError(f"memory mask of {mask.shape} for {hidden.shape[0]} positions")
        keys = np.broadcast_to(mask[None, :], (m_prev.memory.shape[0], hidden.shape[0]))
        return self.summarize_attn(m_prev.memory, hidden, keys, capture)

    def update(self, summary: Tensor, m_prev: MemoryState) -> MemoryState:
        return MemoryState(gru_cell(summary, m_prev.memory, self.gru), m_prev.t + 1)

    def attentive_weight(
        self, bank: MemoryBank, t: int, capture: list[np.ndarray] | None = None
    ) -> Tensor:
        """Memory bundle for frame ``t``.

        ``t == 2`` gives ``M_1``; for ``t >= 3`` the latest memory attends
        over ``M_1 .. M_{t-2}`` and the result is stacked under it. With
        attentive weighting disabled the bundle is ``M_{t-1}``.
        """
        if t < 2:
            raise MemoryBankError(f"no memory exists before frame 2 (asked for frame {t})")
        latest = bank.at(t - 1).memory
        if t == 2 or not self._awm:
            return latest
        past = F.concat([bank.at(i).memory for i in range(1, t - 1)], axis=0)
        weighted = self.awm_attn(latest, past, None, capture)
        return F.concat([latest, weighted], axis=0)

    def fuse(
        self,
        hidden: Tensor,
        bundle: Tensor | None,
        mask: np.ndarray,
        capture: list[np.ndarray] | None = None,
    ) -> Tensor:
        """``Attn(H, [H; M~], [H; M~])``; memory columns are visible to every query."""
        if bundle is None:
            return self.fuse_attn(hidden, hidden, mask, capture)
        if bundle.shape[-1] != hidden.shape[-1]:
            raise DimensionError(
                f"memory width {bundle.shape[-1]} != hidden width {hidden.shape[-1]}"
            )
        keys = F.concat([hidden, bundle], axis=0)
        memory_cols = np.ones((hidden.shape[0], bundle.shape[0]), dtype=bool)
        full = np.concatenate([mask, memory_cols], axis=1)
        return self.fuse_attn(hidden, keys, full, capture)


@dataclass
class MemoryTrace:
    """Attention weights captured during an unroll, keyed by (frame, layer, kind)."""

    records: list[dict[str, Any]] = field(default_factory=list)

    def add(self, frame: int, layer: int, kind: str, weights: np.ndarray) -> None:
        self.records.append({"frame": frame, "layer": layer, "kind": kind, "weights": weights})

    def weight_records(self, **labels: Any) -> Iterator[dict[str, Any]]:
        """One flat record per (frame, layer, kind, head, query, key) attention weight."""
        for entry in self.records:
            weights = entry["weights"]
            for head, query, key in np.ndindex(*weights.shape):
                yield {
                    **labels,
                    "frame": entry["frame"],
                    "layer": entry["layer"],
                    "kind": entry["kind"],
                    "head": head,
                    "query": query,
                    "key": key,
                    "weight": float(weights[head, query, key]),
                }


class MemoryUnroll:
    """Memory chain of one story for one loss direction.

    Call :meth:`bundle` before running frame ``t`` and :meth:`advance` with
    that frame's hidden state afterwards. A disabled unroll yields no
    bundles (fusion layers then attend over the hidden state alone).
    """

    def __init__(
        self,
        paths: Mapping[int, MemoryPath],
        *,
        enabled: bool = True,
        trace: MemoryTrace | None = None,
    ) -> None:
        self.paths = dict(paths) if enabled else {}
        self.trace = trace
        self.t = 1
        self.states = {layer: path.initial_state() for layer, path in self.paths.items()}
        self.banks = {layer: MemoryBank() for layer in self.paths}

    def bundle(self) -> dict[int, Tensor | None]:
        bundles: dict[int, Tensor | None] = {}
        for layer, path in self.paths.items():
            if self.t == 1:
                bundles[layer] = None
                continue
            capture: list[np.ndarray] | None = [] if self.trace is not None else None
            bundles[layer] = path.attentive_weight(self.banks[layer], self.t, capture)
            if self.trace is not None and capture:
                self.trace.add(self.t, layer, "attentive_weight", capture[0])
        return bundles

    def advance(self, hidden: HiddenState, mask: np.ndarray) -> None:
        """Fold frame ``t`` into every path's memory and move to frame ``t + 1``."""
        for layer, path in self.paths.items():
            capture: list[np.ndarray] | None = [] if self.trace is not None else None
            summary = path.summarize(self.states[layer], hidden.layer_input(layer), mask, capture)
            state = path.update(summary, self.states[layer])
            self.banks[layer].append(state)
            self.states[layer] = state
            if self.trace is not None and capture:
                self.trace.add(self.t, layer, "summarize", capture[0])
        self.t += 1
