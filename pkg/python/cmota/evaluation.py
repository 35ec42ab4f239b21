"""Story metrics: oracle character scores, BLEU, patch Fréchet distance, background consistency.

Everything here is a pure function of its inputs. :func:`evaluate` runs a
model over test stories and folds the results into a :class:`MetricReport`.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from sacrebleu.metrics import BLEU
from scipy import linalg

from cmota._config import RunConfig, WorldConfig
from cmota.errors import DimensionError
from cmota.memory import MemoryTrace, MemoryUnroll
from cmota.model import T2I, BiTransformer
from cmota.numerics.tensor import no_grad
from cmota.storage import ArtifactStorage
from cmota.storyworld import SceneSpec, StorySample, detect_scene
from cmota.tokenizer import (
    Codebook,
    TokenSequence,
    Vocab,
    decode_text,
    dequantize,
    extract_patches,
    to_uint8,
)
from cmota.trainer import EncodedStory, encode_story, make_pseudo_texts

logger = logging.getLogger("cmota")

BLEU_EPSILON = 1e-9
LEDGER_KEY = "eval/results.ndjson"


# -- character scores ------------------------------------------------------------------


def detect_frames(
    images: Iterable[np.ndarray], world: WorldConfig | None = None
) -> list[SceneSpec]:
    return [detect_scene(image, world, frame=t) for t, image in enumerate(images)]


def _check_sizes(predicted: Sequence[Any], truth: Sequence[Any]) -> None:
    if len(predicted) != len(truth):
        raise DimensionError(
            f"{len(predicted)} generated frames for {len(truth)} ground-truth frames"
        )


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 1.0


def char_f1_from_specs(predicted: Sequence[SceneSpec], truth: Sequence[SceneSpec]) -> float:
    """Micro-averaged F1 over character presence."""
    _check_sizes(predicted, truth)
    tp = fp = fn = 0
    for p, g in zip(predicted, truth):
        found, wanted = set(p.characters), set(g.characters)
        tp += len(found & wanted)
        fp += len(found - wanted)
        fn += len(wanted - found)
    return _f1(tp, fp, fn)


def frame_accuracy_from_specs(predicted: Sequence[SceneSpec], truth: Sequence[SceneSpec]) -> float:
    _check_sizes(predicted, truth)
    if not truth:
        return 0.0
    hits = sum(set(p.characters) == set(g.characters) for p, g in zip(predicted, truth))
    return hits / len(truth)


def per_character_f1(
    predicted: Sequence[SceneSpec], truth: Sequence[SceneSpec], roster: Sequence[str]
) -> dict[str, float | None]:
    """F1 per character; ``None`` when a character is neither present nor predicted."""
    _check_sizes(predicted, truth)
    scores: dict[str, float | None] = {}
    for name in roster:
        tp = fp = fn = 0
        for p, g in zip(predicted, truth):
            found, wanted = name in p.characters, name in g.characters
            tp += found and wanted
            fp += found and not wanted
            fn += wanted and not found
        scores[name] = _f1(tp, fp, fn) if tp + fp + fn else None
    return scores


def char_f1(
    images: Sequence[np.ndarray], specs: Sequence[SceneSpec], world: WorldConfig | None = None
) -> float:
    _check_sizes(images, specs)
    return char_f1_from_specs(detect_frames(images, world), specs)


def frame_accuracy(
    images: Sequence[np.ndarray], specs: Sequence[SceneSpec], world: WorldConfig | None = None
) -> float:
    _check_sizes(images, specs)
    return frame_accuracy_from_specs(detect_frames(images, world), specs)


# -- BLEU ------------------------------------------------------------------------------


def bleu(candidates: Sequence[str], references: Sequence[str], n: int = 2) -> float:
    """Corpus BLEU-``n`` in ``[0, 1]`` over whitespace tokens, one reference per candidate.

    Zero n-gram matches count as ``BLEU_EPSILON`` matches (the ``floor`` rule).
    """
    if not candidates:
        raise ValueError("bleu needs at least one candidate")
    if len(candidates) != len(references):
        raise DimensionError(f"{len(candidates)} candidates for {len(references)} references")
    metric = BLEU(
        max_ngram_order=n,
        smooth_method="floor",
        smooth_value=BLEU_EPSILON,
        tokenize="none",
        effective_order=False,
    )
    score = metric.corpus_score(list(candidates), [list(references)]).score / 100.0
    return float(min(max(score, 0.0), 1.0))


# -- patch Fréchet distance ------------------------------------------------------------


def patch_features(images: Iterable[np.ndarray], patch: int = 8) -> np.ndarray:
    """Per patch: pixels scaled to ``[0, 1]`` plus mean ``|d/dx|`` and ``|d/dy|``."""
    rows = []
    for image in images:
        channels = image.shape[-1]
        vectors = extract_patches(image, patch) / 255.0
        blocks = vectors.reshape(-1, patch, patch, channels)
        dx = np.abs(np.diff(blocks, axis=2)).mean(axis=(1, 2, 3))
        dy = np.abs(np.diff(blocks, axis=1)).mean(axis=(1, 2, 3))
        rows.append(np.concatenate([vectors, dx[:, None], dy[:, None]], axis=1))
    if not rows:
        raise DimensionError("patch_features needs at least one image")
    return np.concatenate(rows, axis=0)


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if features.shape[0] < 2:
        raise DimensionError("need at least two feature rows to fit a covariance")
    return features.mean(axis=0), np.cov(features, rowvar=False)


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh((matrix + matrix.T) / 2.0)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _shrink(sigma: np.ndarray, shrinkage: float, side: str) -> np.ndarray:
    smallest = linalg.eigh(sigma, eigvals_only=True)[0]
    if smallest > shrinkage:
        return sigma
    logger.warning(
        "⚠ cmota: patch_frechet_distance: %s covariance is singular, adding %g*I", side, shrinkage
    )
    return sigma + shrinkage * np.eye(sigma.shape[0])


def frechet_distance(
    mu1: np.ndarray,
    sigma1: np.ndarray,
    mu2: np.ndarray,
    sigma2: np.ndarray,
    shrinkage: float = 1e-6,
) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))``, clamped at 0.

    The cross term is the nuclear norm of ``S1^(1/2) S2^(1/2)``, built from
    symmetric square roots with negative eigenvalues clamped to 0.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise DimensionError("Gaussian statistics of different dimensions")
    sigma1 = _shrink(sigma1, shrinkage, "first")
    sigma2 = _shrink(sigma2, shrinkage, "second")
    cross = float(np.sum(linalg.svdvals(_sqrt_psd(sigma1) @ _sqrt_psd(sigma2))))
    diff = mu1 - mu2
    distance = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * cross)
    return max(distance, 0.0)


def patch_frechet_distance(
    real: Sequence[np.ndarray],
    generated: Sequence[np.ndarray],
    patch: int = 8,
    shrinkage: float = 1e-6,
) -> float:
    if len(real) < 2 or len(generated) < 2:
        raise DimensionError("patch_frechet_distance needs at least two images per side")
    mu1, s1 = gaussian_stats(patch_features(real, patch))
    mu2, s2 = gaussian_stats(patch_features(generated, patch))
    return frechet_distance(mu1, s1, mu2, s2, shrinkage)


# -- background consistency ------------------------------------------------------------


def bg_consistency_from_specs(
    predicted: Sequence[Sequence[SceneSpec]], stories: Sequence[StorySample]
) -> float:
    _check_sizes(predicted, stories)
    hits = total = 0
    for frames, story in zip(predicted, stories):
        if not story.later_frames_omit_background:
            continue
        _check_sizes(frames, story.scenes)
        for spec in frames[1:]:
            hits += spec.background == story.background
            total += 1
    if total == 0:
        logger.warning(
            "⚠ cmota: bg_consistency has no story whose later sentences omit the background"
        )
        return 0.0
    return hits / total


def bg_consistency(
    generated: Sequence[Sequence[np.ndarray]],
    stories: Sequence[StorySample],
    world: WorldConfig | None = None,
) -> float:
    """Share of frames 2..T drawn with the story's background.

    Only stories whose sentences after the first omit the background count.
    """
    _check_sizes(generated, stories)
    predicted = [detect_frames(frames, world) for frames in generated]
    return bg_consistency_from_specs(predicted, stories)


# -- reports ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    char_f1: float
    frame_acc: float
    bleu2: float
    bleu3: float
    patch_fd: float
    bg_consistency: float
    n_samples: int
    config_hash: str
    per_character: dict[str, float | None] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("char_f1", "frame_acc", "bleu2", "bleu3", "bg_consistency"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.patch_fd < 0:
            raise ValueError(f"patch_fd={self.patch_fd} is negative")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def per_character_tsv(self) -> str:
        lines = ["character\tf1"]
        for name, score in self.per_character.items():
            lines.append(f"{name}\t{'' if score is None else f'{score:.6f}'}")
        return "\n".join(lines) + "\n"


def append_to_ledger(storage: ArtifactStorage, report: MetricReport, key: str = LEDGER_KEY) -> None:
    storage.append_record(key, {"config_hash": report.config_hash, "report": report.to_json()})


def read_ledger(storage: ArtifactStorage, key: str = LEDGER_KEY) -> dict[str, list[dict[str, Any]]]:
    """Ledger records grouped by config hash, in append order."""
    grouped: dict[str, list[dict[str, Any]]] = {}
    for record in storage.read_records(key):
        grouped.setdefault(record["config_hash"], []).append(record["report"])
    return grouped


# -- generation --------------------------------------------------------------------------


@dataclass
class GeneratedStory:
    story_id: str
    tokens: list[TokenSequence]
    images: list[np.ndarray]


def generate_story(
    model: BiTransformer,
    texts: Sequence[TokenSequence],
    codebook: Codebook,
    *,
    story_id: str = "",
    trace: MemoryTrace | None = None,
) -> GeneratedStory:
    """Greedy image tokens for each sentence in order, memory carried across frames."""
    tokens: list[TokenSequence] = []
    with no_grad():
        unroll = MemoryUnroll(model.memory_paths, trace=trace)
        for text in texts:
            image, hidden = model.decode_image(text, unroll.bundle())
            unroll.advance(hidden, model.embed(text, image.tokens[:-1], T2I).text_mask)
            tokens.append(image)
    images = [to_uint8(dequantize(z, codebook)) for z in tokens]
    return GeneratedStory(story_id=story_id, tokens=tokens, images=images)


def evaluate(
    model: BiTransformer,
    stories: Sequence[StorySample],
    vocab: Vocab,
    codebook: Codebook,
    config: RunConfig,
) -> MetricReport:
    """Generate every story, caption every ground-truth image, and score both."""
    start = time.time()
    if config.eval.max_stories:
        stories = stories[: config.eval.max_stories]
    if not stories:
        raise ValueError("evaluate needs at least one story")
    world = config.world
    model.eval()

    predicted: list[list[SceneSpec]] = []
    real_images: list[np.ndarray] = []
    fake_images: list[np.ndarray] = []
    candidates: list[str] = []
    references: list[str] = []
    for story in stories:
        encoded: EncodedStory = encode_story(story, vocab, codebook, config.model.t_text)
        generated = generate_story(model, encoded.texts, codebook, story_id=story.story_id)
        predicted.append(detect_frames(generated.images, world))
        real_images.extend(story.images)
        fake_images.extend(generated.images)
        for pseudo in make_pseudo_texts(encoded, model, epoch=-1):
            candidates.append(decode_text(pseudo.tokens, vocab))
        references.extend(story.sentences)

    flat_pred = [spec for frames in predicted for spec in frames]
    flat_true = [spec for story in stories for spec in story.scenes]
    report = MetricReport(
        char_f1=char_f1_from_specs(flat_pred, flat_true),
        frame_acc=frame_accuracy_from_specs(flat_pred, flat_true),
        bleu2=bleu(candidates, references, 2),
        bleu3=bleu(candidates, references, 3),
        patch_fd=patch_frechet_distance(
            real_images, fake_images, config.tokenizer.patch, config.eval.fd_shrinkage
        ),
        bg_consistency=bg_consistency_from_specs(predicted, stories),
        n_samples=len(stories),
        config_hash=config.config_hash,
        per_character=per_character_f1(flat_pred, flat_true, world.characters),
    )
    logger.debug("evaluate: %d stories in %.3fs", len(stories), time.time() - start)
    return report
