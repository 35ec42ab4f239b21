"""Text and image tokenization.

Sentences become word-level token sequences over a closed vocabulary.
Images become fixed-size grids of codebook indices: each ``P x P`` patch is
replaced by its nearest codebook entry, the codebook being a k-means fit
over training patches.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from sklearn.cluster import KMeans

from cmota.errors import CodebookError, DimensionError, OutOfVocabularyError, TargetIndexError

logger = logging.getLogger("cmota")

PAD, SOS, SOI, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<sos>", "<soi>", "<eos>")

TEXT = "text"
IMAGE = "image"


def normalize(sentence: str) -> str:
    return " ".join(sentence.lower().split())


class Vocab:
    """Word-level token <-> index bijection with the specials at 0..3."""

    def __init__(self, tokens: Sequence[str]) -> None:
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: object) -> bool:
        return word in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    __hash__ = None  # type: ignore[assignment]

    def index(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise OutOfVocabularyError(word) from None

    def token(self, index: int) -> str:
        if not 0 <= index < len(self.tokens):
            raise TargetIndexError(f"token index {index} outside vocabulary of {len(self.tokens)}")
        return self.tokens[index]

    @property
    def words(self) -> tuple[str, ...]:
        return self.tokens[len(SPECIALS) :]

    def to_json(self) -> dict[str, Any]:
        return {"size": len(self), "specials": list(SPECIALS), "tokens": list(self.tokens)}

    def to_bytes(self) -> bytes:
        return "\n".join(self.tokens).encode("utf-8")

    @classmethod
    def from_bytes(cls, blob: bytes) -> Vocab:
        return cls(blob.decode("utf-8").split("\n"))


def build_vocab(corpus: Iterable[str]) -> Vocab:
    """Specials followed by every corpus word in lexicographic order."""
    sentences = list(corpus)
    if not sentences:
        raise ValueError("build_vocab needs a non-empty corpus")
    words = {w for s in sentences for w in normalize(s).split()}
    clash = words & set(SPECIALS)
    if clash:
        raise ValueError(f"corpus words collide with special tokens: {sorted(clash)}")
    return Vocab(SPECIALS + tuple(sorted(words)))


class TokenSequence:
    """Indices of one modality, padded to a fixed capacity with the true length kept.

    Text sequences are padded with PAD up to ``T_text``; image sequences are
    always exactly ``T_image`` long.
    """

    __slots__ = ("modality", "indices", "length")

    def __init__(self, modality: str, indices: np.ndarray, length: int) -> None:
        if modality not in (TEXT, IMAGE):
            raise ValueError(f"unknown modality {modality!r}")
        if not 0 <= length <= len(indices):
            raise DimensionError(f"length {length} outside capacity {len(indices)}")
        self.modality = modality
        self.indices = np.asarray(indices, dtype=np.int64)
        self.length = int(length)

    @classmethod
    def text(cls, tokens: Sequence[int], capacity: int) -> TokenSequence:
        if len(tokens) > capacity:
            raise DimensionError(f"text of {len(tokens)} tokens exceeds T_text={capacity}")
        padded = np.full(capacity, PAD, dtype=np.int64)
        padded[: len(tokens)] = np.asarray(tokens, dtype=np.int64)
        return cls(TEXT, padded, len(tokens))

    @classmethod
    def image(cls, tokens: Sequence[int] | np.ndarray) -> TokenSequence:
        arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
        return cls(IMAGE, arr, arr.size)

    @property
    def tokens(self) -> np.ndarray:
        return self.indices[: self.length]

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, TokenSequence)
            and self.modality == other.modality
            and self.length == other.length
            and np.array_equal(self.tokens, other.tokens)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"TokenSequence({self.modality}, {self.tokens.tolist()})"


def encode_text(sentence: str, vocab: Vocab, capacity: int) -> TokenSequence:
    """Words of ``sentence`` followed by EOS, PAD-padded to ``capacity``."""
    ids = [vocab.index(w) for w in normalize(sentence).split()]
    ids.append(EOS)
    return TokenSequence.text(ids, capacity)


def decode_text(tokens: TokenSequence | Sequence[int], vocab: Vocab) -> str:
    """Inverse of :func:`encode_text`; stops at EOS and skips specials."""
    ids = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens)
    words: list[str] = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i < len(SPECIALS):
            continue
        words.append(vocab.token(i))
    return " ".join(words)


# -- images -------------------------------------------------------------------------------


def _check_divisible(image: np.ndarray, patch: int) -> tuple[int, int, int]:
    if image.ndim != 3:
        raise DimensionError(f"expected an HxWxC image, got shape {image.shape}")
    h, w, c = image.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible into {patch}x{patch} patches")
    return h, w, c


def extract_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """Row-major ``[rows * cols, patch * patch * C]`` patch vectors."""
    h, w, c = _check_divisible(image, patch)
    rows, cols = h // patch, w // patch
    blocks = np.asarray(image, dtype=np.float64).reshape(rows, patch, cols, patch, c)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(rows * cols, patch * patch * c)


def assemble_patches(
    vectors: np.ndarray, rows: int, cols: int, patch: int, channels: int
) -> np.ndarray:
    blocks = vectors.reshape(rows, cols, patch, patch, channels)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(rows * patch, cols * patch, channels)


@dataclass(frozen=True)
class Codebook:
    """``K`` patch vectors of length ``P * P * C`` in pixel units."""

    entries: np.ndarray
    patch: int
    channels: int

    def __post_init__(self) -> None:
        width = self.patch * self.patch * self.channels
        if self.entries.ndim != 2 or self.entries.shape[1] != width:
            raise DimensionError(
                f"codebook entries {self.entries.shape} do not match "
                f"{self.patch}x{self.patch}x{self.channels} patches"
            )
        if self.size < 2:
            raise CodebookError("codebook needs at least 2 entries")
        if not np.all(np.isfinite(self.entries)):
            raise CodebookError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])

    def to_json(self) -> dict[str, Any]:
        return {
            "size": self.size,
            "patch": self.patch,
            "channels": self.channels,
            "entries": self.entries.tolist(),
        }


def fit_codebook(
    images: Iterable[np.ndarray],
    k: int,
    patch: int,
    *,
    seed: int = 0,
    max_iter: int = 100,
) -> Codebook:
    """k-means++ (single init, fixed seed) over every patch of ``images``.

    Identical patches are collapsed and weighted by their count before
    fitting; the k-means objective is unchanged.
    """
    start = time.time()
    vectors = []
    channels = None
    for image in images:
        channels = _check_divisible(image, patch)[2]
        vectors.append(extract_patches(image, patch))
    if not vectors or channels is None:
        raise CodebookError("fit_codebook needs at least one image")
    data = np.concatenate(vectors, axis=0)
    unique, counts = np.unique(data, axis=0, return_counts=True)
    if k > unique.shape[0]:
        raise CodebookError(f"K={k} exceeds the {unique.shape[0]} distinct patches in the data")
    kmeans = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, random_state=seed)
    kmeans.fit(unique, sample_weight=counts.astype(np.float64))
    entries = np.asarray(kmeans.cluster_centers_, dtype=np.float64)
    if np.unique(entries, axis=0).shape[0] != k:
        raise CodebookError("k-means produced duplicate codebook entries")
    logger.debug(
        "fit_codebook: K=%d over %d patches (%d distinct) in %.3fs",
        k,
        data.shape[0],
        unique.shape[0],
        time.time() - start,
    )
    return Codebook(entries=entries, patch=patch, channels=channels)


def nearest_entries(vectors: np.ndarray, codebook: Codebook, chunk: int = 256) -> np.ndarray:
    """Index of the nearest entry per vector (squared Euclidean; ties to the lowest index)."""
    out = np.empty(vectors.shape[0], dtype=np.int64)
    for start in range(0, vectors.shape[0], chunk):
        block = vectors[start : start + chunk]
        diff = block[:, None, :] - codebook.entries[None, :, :]
        out[start : start + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out


def quantize_image(image: np.ndarray, codebook: Codebook) -> TokenSequence:
    _, _, c = _check_divisible(image, codebook.patch)
    if c != codebook.channels:
        raise DimensionError(f"image has {c} channels, codebook expects {codebook.channels}")
    return TokenSequence.image(nearest_entries(extract_patches(image, codebook.patch), codebook))


def dequantize(
    tokens: TokenSequence | Sequence[int],
    codebook: Codebook,
    grid: tuple[int, int] | None = None,
) -> np.ndarray:
    """Place codebook patches back on a square (or ``grid``-shaped) raster, float64 pixels."""
    ids = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= codebook.size):
        bad = int(ids[(ids < 0) | (ids >= codebook.size)][0])
        raise CodebookError(f"image token {bad} outside codebook of {codebook.size}")
    if grid is None:
        side = int(round(np.sqrt(ids.size)))
        if side * side != ids.size:
            raise DimensionError(f"{ids.size} tokens do not form a square grid")
        grid = (side, side)
    return assemble_patches(
        codebook.entries[ids], grid[0], grid[1], codebook.patch, codebook.channels
    )


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)
