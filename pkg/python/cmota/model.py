"""Bi-directional text/image-token transformer.

One trunk serves both directions:

- ``t2i``: ``[SOS, t_1..t_m, SOI, z_1..z_{n-1}]`` predicts ``z_1..z_n``
- ``i2t``: ``[SOI, z_1..z_n, SOS, t_1..t_{m-1}]`` predicts ``t_1..t_m``

Source positions see each other; target positions see the source and
earlier targets. Text and image tokens have their own embedding tables and
output heads. Blocks are pre-norm; the layers chosen by the memory topology
get an extra fuse sub-layer between self-attention and feed-forward.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from cmota._config import ModelConfig
from cmota.errors import ConfigError, DimensionError
from cmota.layers import Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention
from cmota.memory import (
    IMAGE_TAG,
    TEXT_TAG,
    MemoryPath,
    apply_topology,
    build_memory_mask,
    memory_path_parameter_count,
)
from cmota.numerics import functional as F
from cmota.numerics.module import Module
from cmota.numerics.tensor import Tensor, no_grad
from cmota.tokenizer import EOS, IMAGE, SOI, SOS, TEXT, TokenSequence

logger = logging.getLogger("cmota")

T2I = "t2i"
I2T = "i2t"
DIRECTIONS = (T2I, I2T)

MemoryBundle = Mapping[int, "Tensor | None"]


def prefix_lm_mask(n_source: int, total: int) -> np.ndarray:
    """``mask[i, j]`` is true when position ``i`` may attend to ``j``."""
    i = np.arange(total)[:, None]
    j = np.arange(total)[None, :]
    return (j < n_source) | (j <= i)


@dataclass(frozen=True)
class Embedded:
    """An embedded sequence plus the layout facts the forward pass needs."""

    x: Tensor
    direction: str
    n_source: int
    modalities: tuple[str, ...]

    @property
    def length(self) -> int:
        return len(self.modalities)

    @property
    def mask(self) -> np.ndarray:
        return prefix_lm_mask(self.n_source, self.length)

    @property
    def text_mask(self) -> np.ndarray:
        return build_memory_mask(self.modalities)


@dataclass(frozen=True)
class HiddenState:
    """Per-layer activations ``H^l`` of one forward pass.

    ``inputs[l - 1]`` is the input to layer ``l``; ``output`` is the final
    normalized state.
    """

    inputs: tuple[Tensor, ...]
    output: Tensor

    def layer_input(self, layer: int) -> Tensor:
        if not 1 <= layer <= len(self.inputs):
            raise DimensionError(f"layer {layer} outside 1..{len(self.inputs)}")
        return self.inputs[layer - 1]


class TransformerBlock(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype: Any) -> None:
        d, std = config.hidden, config.init_std
        self.norm1 = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, config.heads, rng, std, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, config.ffn_mult, rng, std, dtype)


class BiTransformer(Module):
    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        config.validate()
        if config.text_vocab_size < 4:
            raise ConfigError("model.text_vocab_size must be resolved (at least the 4 specials)")
        self._config = config
        self._dtype = np.dtype(config.precision)
        self._fusion_layers = apply_topology(config)
        rng = np.random.default_rng(seed)
        d, std, dtype = config.hidden, config.init_std, self._dtype

        self.text_embed = Embedding(config.text_vocab_size, d, rng, std, dtype)
        self.image_embed = Embedding(config.codebook_size, d, rng, std, dtype)
        self.position = Embedding(config.max_positions, d, rng, std, dtype)
        self.segment = Embedding(2, d, rng, std, dtype)
        self.blocks = [TransformerBlock(config, rng, dtype) for _ in range(config.layers)]
        self.memory = {
            str(layer): MemoryPath(config, rng, dtype) for layer in sorted(self._fusion_layers)
        }
        self.final_norm = LayerNorm(d, dtype)
        self.text_head = Linear(d, config.text_vocab_size, rng, std, dtype)
        self.image_head = Linear(d, config.codebook_size, rng, std, dtype)

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def fusion_layers(self) -> frozenset[int]:
        return self._fusion_layers

    @property
    def memory_paths(self) -> dict[int, MemoryPath]:
        return {int(layer): path for layer, path in self.memory.items()}

    # -- embedding ---------------------------------------------------------------------

    def embed(
        self,
        source: TokenSequence,
        target_prefix: Sequence[int] | np.ndarray,
        direction: str,
        *,
        rng: np.random.Generator | None = None,
    ) -> Embedded:
        """Token + absolute position + segment embeddings of one combined sequence."""
        cfg = self._config
        prefix = np.asarray(target_prefix, dtype=np.int64).reshape(-1)
        if direction == T2I:
            if source.modality != TEXT:
                raise DimensionError("t2i needs a text source")
            if len(source) > cfg.t_text or prefix.size > cfg.t_image:
                raise DimensionError("t2i sequence exceeds T_text/T_image")
            src_ids = np.concatenate([[SOS], source.tokens])
            parts = [
                self.text_embed(src_ids),
                self.text_embed([SOI]),
                self.image_embed(prefix),
            ]
            modalities = (TEXT_TAG,) * len(src_ids) + (IMAGE_TAG,) * (1 + prefix.size)
            n_source = len(src_ids)
        elif direction == I2T:
            if source.modality != IMAGE:
                raise DimensionError("i2t needs an image source")
            if len(source) > cfg.t_image or prefix.size > cfg.t_text:
                raise DimensionError("i2t sequence exceeds T_image/T_text")
            parts = [
                self.text_embed([SOI]),
                self.image_embed(source.tokens),
                self.text_embed(np.concatenate([[SOS], prefix]).astype(np.int64)),
            ]
            modalities = (IMAGE_TAG,) * (1 + len(source)) + (TEXT_TAG,) * (1 + prefix.size)
            n_source = 1 + len(source)
        else:
            raise ValueError(f"unknown direction {direction!r}")

        total = len(modalities)
        if total > cfg.max_positions:
            raise DimensionError(f"{total} positions exceed the table of {cfg.max_positions}")
        segments = (np.arange(total) >= n_source).astype(np.int64)
        x = F.concat(parts, axis=0)
        x = F.add(F.add(x, self.position(np.arange(total))), self.segment(segments))
        x = self._dropout(x, rng)
        return Embedded(x=x, direction=direction, n_source=n_source, modalities=modalities)

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        if not self.training:
            return x
        return F.dropout(x, self._config.dropout, rng)

    # -- forward -----------------------------------------------------------------------

    def forward(
        self,
        embedded: Embedded,
        memory_bundle: MemoryBundle | None = None,
        *,
        rng: np.random.Generator | None = None,
        capture: dict[str, list[np.ndarray]] | None = None,
    ) -> tuple[Tensor, HiddenState]:
        """Next-token logits at every target position, plus the hidden states."""
        mask = embedded.mask
        bundles = memory_bundle or {}
        h = embedded.x
        inputs: list[Tensor] = []
        for layer, block in enumerate(self.blocks, start=1):
            inputs.append(h)
            hn = block.norm1(h)
            h = F.add(h, self._dropout(block.attn(hn, hn, mask), rng))
            path = self.memory.get(str(layer))
            if path is not None:
                sink = capture.setdefault(f"fuse.{layer}", []) if capture is not None else None
                fused = path.fuse(path.fuse_norm(h), bundles.get(layer), mask, sink)
                h = F.add(h, self._dropout(fused, rng))
            h = F.add(h, self._dropout(block.ffn(block.norm2(h)), rng))
        out = self.final_norm(h)
        target = out[embedded.n_source :]
        head = self.image_head if embedded.direction == T2I else self.text_head
        return head(target), HiddenState(inputs=tuple(inputs), output=out)

    __call__ = forward

    # -- greedy decoding ---------------------------------------------------------------

    def decode_image(
        self, text: TokenSequence, memory_bundle: MemoryBundle | None = None
    ) -> tuple[TokenSequence, HiddenState]:
        """Greedy ``T_image`` tokens plus the hidden state of the final pass.

        The final pass sees ``[SOS, text, SOI, z_1..z_{n-1}]``, the same layout
        as teacher forcing on the generated tokens.
        """
        tokens: list[int] = []
        hidden: HiddenState | None = None
        with no_grad():
            for _ in range(self._config.t_image):
                logits, hidden = self.forward(self.embed(text, tokens, T2I), memory_bundle)
                tokens.append(int(np.argmax(logits.data[-1])))
        assert hidden is not None
        return TokenSequence.image(tokens), hidden

    def decode_text(
        self,
        image: TokenSequence,
        memory_bundle: MemoryBundle | None = None,
        max_len: int | None = None,
    ) -> tuple[TokenSequence, HiddenState]:
        """Greedy text until EOS or ``max_len`` (capped at ``T_text``)."""
        limit = self._config.t_text if max_len is None else min(max_len, self._config.t_text)
        tokens: list[int] = []
        hidden: HiddenState | None = None
        with no_grad():
            while len(tokens) < limit:
                logits, hidden = self.forward(self.embed(image, tokens, I2T), memory_bundle)
                token = int(np.argmax(logits.data[-1]))
                tokens.append(token)
                if token == EOS:
                    break
        if hidden is None:
            with no_grad():
                _, hidden = self.forward(self.embed(image, tokens, I2T), memory_bundle)
        return TokenSequence.text(tokens, self._config.t_text), hidden


def generate_image_tokens(
    model: BiTransformer, text: TokenSequence, memory_bundle: MemoryBundle | None = None
) -> TokenSequence:
    return model.decode_image(text, memory_bundle)[0]


def generate_text_tokens(
    model: BiTransformer,
    image: TokenSequence,
    memory_bundle: MemoryBundle | None = None,
    max_len: int | None = None,
) -> TokenSequence:
    return model.decode_text(image, memory_bundle, max_len)[0]


# -- parameter accounting ------------------------------------------------------------------


def parameter_breakdown(config: ModelConfig) -> dict[str, int]:
    """Closed-form trainable counts per part (see :class:`~cmota._config.ModelConfig`)."""
    d = config.hidden
    v, k = config.text_vocab_size, config.codebook_size
    return {
        "embeddings": (v + k + config.max_positions + 2) * d,
        "blocks": config.layers * (12 * d * d + 13 * d),
        "memory": len(apply_topology(config)) * memory_path_parameter_count(config),
        "final_norm": 2 * d,
        "heads": (d + 1) * (v + k),
    }


def parameter_count(config: ModelConfig) -> int:
    return sum(parameter_breakdown(config).values())


def count_trainables(model: Module) -> int:
    return model.num_parameters()
