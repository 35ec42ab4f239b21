"""Training: direction losses, pseudo-text augmentation and the AdamW loop.

Per story the total objective is::

    L = L_t2i + lambda1 * L_i2t + lambda2 * L_pt2i

Each term sums token NLL over a frame and over the story's frames, with
its own memory chain unrolled frame by frame. A batch loss divides the
summed story losses by the number of frames in the batch.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from collections.abc import Callable, Iterable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from cmota._config import ModelConfig, RunConfig
from cmota.checkpoint import Checkpoint
from cmota.errors import CheckpointError, NumericalError, PseudoTextError
from cmota.memory import MemoryTrace, MemoryUnroll
from cmota.model import I2T, T2I, BiTransformer, MemoryBundle
from cmota.numerics import functional as F
from cmota.numerics.tensor import Tensor, grad, no_grad
from cmota.optim import AdamWState, adamw_step, clip_grad_norm
from cmota.storage import ArtifactStorage
from cmota.storyworld import StorySample
from cmota.tokenizer import Codebook, TokenSequence, Vocab, encode_text, quantize_image

logger = logging.getLogger("cmota")

_STREAMS = {"t2i": 0, "i2t": 1, "pt2i": 2}


# -- data ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class EncodedStory:
    story_id: str
    texts: tuple[TokenSequence, ...]
    images: tuple[TokenSequence, ...]

    @property
    def frames(self) -> int:
        return len(self.texts)

    @property
    def token_count(self) -> int:
        return sum(len(t) for t in self.texts) + sum(len(z) for z in self.images)


def encode_story(story: StorySample, vocab: Vocab, codebook: Codebook, t_text: int) -> EncodedStory:
    return EncodedStory(
        story_id=story.story_id,
        texts=tuple(encode_text(s, vocab, t_text) for s in story.sentences),
        images=tuple(quantize_image(img, codebook) for img in story.images),
    )


def encode_stories(
    stories: Iterable[StorySample], vocab: Vocab, codebook: Codebook, t_text: int
) -> list[EncodedStory]:
    return [encode_story(s, vocab, codebook, t_text) for s in stories]


def iterate_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Story indices of every batch of ``epoch``; the last batch may be short."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def dropout_rng(seed: int, step: int, story_index: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, step, story_index, _STREAMS[stream]])


# -- pseudo-texts -------------------------------------------------------------------------


@dataclass(frozen=True)
class PseudoText:
    """A generated caption; never linked to the parameters that produced it."""

    tokens: TokenSequence
    story_id: str
    frame: int
    epoch: int


@dataclass
class PseudoTextBank:
    """Newest pseudo-text per (story, frame), with how often each image was captioned."""

    entries: dict[tuple[str, int], PseudoText] = field(default_factory=dict)
    counts: Counter[tuple[str, int]] = field(default_factory=Counter)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def generated(self) -> int:
        return sum(self.counts.values())

    def add(self, texts: Iterable[PseudoText]) -> None:
        for text in texts:
            key = (text.story_id, text.frame)
            self.entries[key] = text
            self.counts[key] += 1

    def latest(self, story_id: str, frames: int) -> list[TokenSequence] | None:
        """Most recent pseudo-text per frame, or ``None`` if any frame has none."""
        found = [self.entries.get((story_id, t)) for t in range(frames)]
        if any(text is None for text in found):
            return None
        return [text.tokens for text in found]  # type: ignore[union-attr]

    def __iter__(self) -> Iterator[PseudoText]:
        return iter(self.entries.values())

    def per_image_counts(self) -> Counter[tuple[str, int]]:
        return Counter(self.counts)

    def epochs(self) -> set[int]:
        return {text.epoch for text in self.entries.values()}


def make_pseudo_text(
    image: TokenSequence, model: BiTransformer, memory_bundle: MemoryBundle | None = None
) -> TokenSequence:
    """Greedy caption of one ground-truth image, computed without a graph."""
    with no_grad():
        return model.decode_text(image, memory_bundle)[0]


def make_pseudo_texts(story: EncodedStory, model: BiTransformer, epoch: int) -> list[PseudoText]:
    """Caption every frame in order, carrying the i2t memory chain over the captions."""
    texts = []
    with no_grad():
        unroll = MemoryUnroll(model.memory_paths, enabled=model.config.memory_in_i2t)
        for t, image in enumerate(story.images):
            tokens, hidden = model.decode_text(image, unroll.bundle())
            unroll.advance(hidden, _i2t_text_mask(model, image, tokens))
            texts.append(PseudoText(tokens, story.story_id, t, epoch))
    return texts


def _i2t_text_mask(model: BiTransformer, image: TokenSequence, tokens: TokenSequence) -> np.ndarray:
    prefix = tokens.tokens[:-1] if len(tokens) else tokens.tokens
    return model.embed(image, prefix, I2T).text_mask


def check_captioner(captioner: ModelConfig, config: ModelConfig) -> None:
    for name in ("text_vocab_size", "codebook_size", "t_text", "t_image"):
        if getattr(captioner, name) != getattr(config, name):
            raise CheckpointError(
                f"captioner {name}={getattr(captioner, name)} "
                f"does not match {getattr(config, name)}"
            )


def offline_augment(
    stories: Sequence[EncodedStory], captioner: BiTransformer, config: ModelConfig | None = None
) -> PseudoTextBank:
    """One frozen pseudo-text per training image, generated before training."""
    if config is not None:
        check_captioner(captioner.config, config)
    start = time.time()
    bank = PseudoTextBank()
    for story in stories:
        bank.add(make_pseudo_texts(story, captioner, epoch=-1))
    logger.debug("offline_augment: %d pseudo-texts in %.3fs", len(bank), time.time() - start)
    return bank


# -- losses -------------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectionLoss:
    total: Tensor
    per_frame: tuple[float, ...]


def _sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = F.add(total, term)
    return total


def _teacher_forced_t2i(
    model: BiTransformer,
    texts: Sequence[TokenSequence],
    images: Sequence[TokenSequence],
    rng: np.random.Generator | None,
    trace: MemoryTrace | None = None,
) -> DirectionLoss:
    unroll = MemoryUnroll(model.memory_paths, trace=trace)
    losses = []
    for text, image in zip(texts, images):
        bundle = unroll.bundle()
        seq = model.embed(text, image.tokens[:-1], T2I, rng=rng)
        logits, hidden = model.forward(seq, bundle, rng=rng)
        losses.append(F.cross_entropy(logits, image.tokens))
        unroll.advance(hidden, seq.text_mask)
    return DirectionLoss(_sum(losses), tuple(loss.item() for loss in losses))


def loss_t2i(
    story: EncodedStory,
    model: BiTransformer,
    *,
    rng: np.random.Generator | None = None,
    trace: MemoryTrace | None = None,
) -> DirectionLoss:
    """Image-token NLL given each frame's sentence, memory unrolled over frames."""
    return _teacher_forced_t2i(model, story.texts, story.images, rng, trace)


def loss_i2t(
    story: EncodedStory, model: BiTransformer, *, rng: np.random.Generator | None = None
) -> DirectionLoss:
    """Text-token NLL (through EOS) given each frame's image tokens."""
    unroll = MemoryUnroll(model.memory_paths, enabled=model.config.memory_in_i2t)
    losses = []
    for text, image in zip(story.texts, story.images):
        bundle = unroll.bundle()
        seq = model.embed(image, text.tokens[:-1], I2T, rng=rng)
        logits, hidden = model.forward(seq, bundle, rng=rng)
        losses.append(F.cross_entropy(logits, text.tokens))
        unroll.advance(hidden, seq.text_mask)
    return DirectionLoss(_sum(losses), tuple(loss.item() for loss in losses))


def loss_pt2i(
    story: EncodedStory,
    pseudo_texts: Sequence[TokenSequence | PseudoText] | None,
    model: BiTransformer,
    *,
    rng: np.random.Generator | None = None,
) -> DirectionLoss:
    """``loss_t2i`` with pseudo-texts in place of the ground-truth sentences."""
    if pseudo_texts is None or len(pseudo_texts) < story.frames:
        have = 0 if pseudo_texts is None else len(pseudo_texts)
        raise PseudoTextError(f"{story.story_id}: pseudo-text missing for frame {have + 1}")
    texts = [p.tokens if isinstance(p, PseudoText) else p for p in pseudo_texts]
    return _teacher_forced_t2i(model, texts, story.images, rng)


@dataclass
class LossBreakdown:
    """Batch losses (per frame of the batch) with per-frame components."""

    t2i: float = 0.0
    i2t: float = 0.0
    pt2i: float = 0.0
    total: float = 0.0
    frames: int = 0
    per_frame: dict[str, list[float]] = field(
        default_factory=lambda: {"t2i": [], "i2t": [], "pt2i": []}
    )

    def check(self, lambda1: float, lambda2: float, tol: float = 1e-9) -> None:
        """Compare the differentiated objective in ``total`` with the weighted components."""
        expected = self.t2i + lambda1 * self.i2t + lambda2 * self.pt2i
        if abs(expected - self.total) > tol * max(1.0, abs(expected)):
            raise NumericalError(
                "loss_breakdown",
                f"total {self.total!r} != components {expected!r}",
                {"t2i": self.t2i, "i2t": self.i2t, "pt2i": self.pt2i},
            )

    def as_record(self) -> dict[str, float]:
        return {"l_t2i": self.t2i, "l_i2t": self.i2t, "l_pt2i": self.pt2i, "l_total": self.total}


@dataclass
class StoryResult:
    grads: list[np.ndarray]
    t2i: DirectionLoss
    i2t: DirectionLoss | None
    pt2i: DirectionLoss | None
    objective: float = 0.0


def _finite(results: list[StoryResult]) -> list[StoryResult]:
    for result in results:
        for name in ("t2i", "i2t", "pt2i"):
            loss = getattr(result, name)
            if loss is not None and not np.isfinite(loss.total.item()):
                diagnostics = {"per_frame": list(loss.per_frame)}
                raise NumericalError("loss", f"non-finite {name} loss", diagnostics)
    return results


def teacher_forced_accuracy(
    model: BiTransformer, stories: Sequence[EncodedStory], direction: str = T2I
) -> float:
    """Fraction of target tokens whose argmax prediction is right under teacher forcing."""
    was_training = model.training
    model.eval()
    correct = total = 0
    try:
        with no_grad():
            for story in stories:
                enabled = direction == T2I or model.config.memory_in_i2t
                unroll = MemoryUnroll(model.memory_paths, enabled=enabled)
                for text, image in zip(story.texts, story.images):
                    bundle = unroll.bundle()
                    if direction == T2I:
                        seq, targets = model.embed(text, image.tokens[:-1], T2I), image.tokens
                    else:
                        seq, targets = model.embed(image, text.tokens[:-1], I2T), text.tokens
                    logits, hidden = model.forward(seq, bundle)
                    correct += int(np.sum(np.argmax(logits.data, axis=1) == targets))
                    total += len(targets)
                    unroll.advance(hidden, seq.text_mask)
    finally:
        model.train(was_training)
    return correct / total if total else 0.0


# -- loop ---------------------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int = 0
    batch: int = 0
    step: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    steps: int
    t2i: float
    i2t: float
    pt2i: float
    total: float
    pseudo_texts: int
    image_accuracy: float | None = None
    seconds: float = 0.0


class Trainer:
    """Single-writer optimizer loop over encoded training stories.

    Batch order and every dropout mask derive from ``(seed, epoch)`` and
    ``(seed, step, story)``, so :class:`TrainState` counters are all a
    resumed run needs.
    """

    def __init__(
        self,
        model: BiTransformer,
        config: RunConfig,
        stories: Sequence[EncodedStory],
        *,
        offline: PseudoTextBank | None = None,
        storage: ArtifactStorage | None = None,
        metrics_key: str = "metrics.ndjson",
        checkpoint_fn: Callable[[Trainer], None] | None = None,
        failure_fn: Callable[[Trainer, NumericalError], None] | None = None,
    ) -> None:
        self.model = model
        self.config = config
        self.train_config = config.train
        self.stories = list(stories)
        if not self.stories:
            raise ValueError("training needs at least one story")
        self.names = [name for name, _ in model.named_parameters()]
        self.params = model.parameters()
        self.optimizer = AdamWState.zeros(self.params)
        self.state = TrainState()
        self.offline = offline
        self.bank = PseudoTextBank()
        self.storage = storage
        self.metrics_key = metrics_key
        self.checkpoint_fn = checkpoint_fn
        self.failure_fn = failure_fn
        if self.train_config.augmentation == "offline" and offline is None:
            raise PseudoTextError("offline augmentation needs pseudo-texts from a captioner")

    # -- per-story gradients -----------------------------------------------------------

    @property
    def bidirectional(self) -> bool:
        return self.train_config.bidirectional

    def augmentation_active(self, epoch: int) -> bool:
        mode = self.train_config.augmentation
        if mode == "offline":
            return True
        return mode == "online" and epoch >= self.train_config.warmup_epochs

    def _pseudo_texts(self, story: EncodedStory, epoch: int) -> list[TokenSequence] | None:
        if not self.augmentation_active(epoch):
            return None
        if self.train_config.augmentation == "offline":
            assert self.offline is not None
            texts = self.offline.latest(story.story_id, story.frames)
            if texts is None:
                raise PseudoTextError(f"{story.story_id}: no offline pseudo-texts")
            return texts
        generated = make_pseudo_texts(story, self.model, epoch)
        self.bank.add(generated)
        return [p.tokens for p in generated]

    def _story_result(
        self,
        index: int,
        pseudo: list[TokenSequence] | None,
        scale: float,
        phase: str,
    ) -> StoryResult:
        """Scaled gradients of one story for ``phase`` ("joint", "t2i" or "i2t")."""
        cfg = self.train_config
        step = self.state.step
        story = self.stories[index]
        seed = self.config.seed
        t2i = i2t = pt2i = None
        terms: list[Tensor] = []

        if phase in ("joint", "t2i"):
            t2i = loss_t2i(story, self.model, rng=dropout_rng(seed, step, index, "t2i"))
            terms.append(t2i.total)
            if pseudo is not None:
                if cfg.lambda2 > 0:
                    rng = dropout_rng(seed, step, index, "pt2i")
                    pt2i = loss_pt2i(story, pseudo, self.model, rng=rng)
                    terms.append(F.mul(pt2i.total, cfg.lambda2))
                else:
                    with no_grad():
                        pt2i = loss_pt2i(story, pseudo, self.model)
        if phase in ("joint", "i2t") and self.bidirectional:
            if cfg.lambda1 > 0:
                i2t = loss_i2t(story, self.model, rng=dropout_rng(seed, step, index, "i2t"))
                terms.append(F.mul(i2t.total, cfg.lambda1))
            else:
                with no_grad():
                    i2t = loss_i2t(story, self.model)

        objective = 0.0
        if terms:
            scaled = F.mul(_sum(terms), scale)
            objective = scaled.item()
            grads = grad(scaled, self.params)
        else:
            grads = [np.zeros_like(p.data) for p in self.params]
        return StoryResult(  # type: ignore[arg-type]
            grads=grads, t2i=t2i, i2t=i2t, pt2i=pt2i, objective=objective
        )

    def _batch_results(
        self,
        batch: Sequence[int],
        pseudo: dict[int, list[TokenSequence] | None],
        scale: float,
        phase: str,
    ) -> list[StoryResult]:
        workers = self.train_config.workers
        if workers <= 1 or len(batch) <= 1:
            return [self._story_result(int(i), pseudo[int(i)], scale, phase) for i in batch]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map preserves story order, so the reduction below is deterministic
            return list(
                pool.map(lambda i: self._story_result(int(i), pseudo[int(i)], scale, phase), batch)
            )

    def _apply(self, results: Sequence[StoryResult]) -> float:
        summed = [np.zeros_like(p.data) for p in self.params]
        for result in results:
            for acc, g in zip(summed, result.grads):
                acc += g
        clipped, norm = clip_grad_norm(summed, self.train_config.grad_clip)
        adamw_step(self.params, clipped, self.optimizer, self.train_config)
        return norm

    # -- steps and epochs --------------------------------------------------------------

    def step(self, batch: Sequence[int]) -> LossBreakdown:
        cfg = self.train_config
        start = time.time()
        epoch = self.state.epoch
        frames = sum(self.stories[int(i)].frames for i in batch)
        scale = 1.0 / frames
        try:
            pseudo = {int(i): self._pseudo_texts(self.stories[int(i)], epoch) for i in batch}
            if cfg.alternation == "joint":
                results = self._batch_results(batch, pseudo, scale, "joint")
                norm = self._apply(_finite(results))
            else:
                results = self._batch_results(batch, pseudo, scale, "t2i")
                norm = self._apply(_finite(results))
                if self.bidirectional:
                    text_results = _finite(self._batch_results(batch, pseudo, scale, "i2t"))
                    if cfg.lambda1 > 0:
                        norm = max(norm, self._apply(text_results))
                    for result, text in zip(results, text_results):
                        result.i2t = text.i2t
                        result.objective += text.objective
        except NumericalError as exc:
            exc.diagnostics.update(
                {"step": self.state.step, "epoch": epoch, "batch": self.state.batch}
            )
            logger.warning("⚠ cmota: non-finite value in %s at step %d", exc.op, self.state.step)
            if self.failure_fn is not None:
                self.failure_fn(self, exc)
            raise

        breakdown = LossBreakdown(frames=frames)
        for result in results:
            breakdown.total += result.objective
            breakdown.t2i += result.t2i.total.item() * scale
            breakdown.per_frame["t2i"].extend(result.t2i.per_frame)
            if result.i2t is not None:
                breakdown.i2t += result.i2t.total.item() * scale
                breakdown.per_frame["i2t"].extend(result.i2t.per_frame)
            if result.pt2i is not None:
                breakdown.pt2i += result.pt2i.total.item() * scale
                breakdown.per_frame["pt2i"].extend(result.pt2i.per_frame)
        lambda1 = cfg.lambda1 if self.bidirectional else 0.0
        tol = 1e-9 if self.config.model.precision == "float64" else 1e-5
        breakdown.check(lambda1, cfg.lambda2, tol=tol)

        elapsed = time.time() - start
        self.state.step += 1
        self.state.batch += 1
        tokens = sum(self.stories[int(i)].token_count for i in batch)
        if self.storage is not None:
            record: dict[str, Any] = {
                "step": self.state.step,
                "epoch": epoch,
                "lr": cfg.effective_lr,
                "grad_norm": norm,
                "tokens_per_s": tokens / elapsed if elapsed > 0 else None,
            }
            record.update(breakdown.as_record())
            self.storage.append_record(self.metrics_key, record)
        logger.debug(
            "step %d: total %.4f (t2i %.4f, i2t %.4f, pt2i %.4f) in %.3fs",
            self.state.step,
            breakdown.total,
            breakdown.t2i,
            breakdown.i2t,
            breakdown.pt2i,
            elapsed,
        )
        every = cfg.checkpoint_every
        if self.checkpoint_fn is not None and every and self.state.step % every == 0:
            self.checkpoint_fn(self)
        return breakdown

    def train_epoch(self, max_steps: int | None = None) -> EpochMetrics:
        """Run the rest of the current epoch (or until ``max_steps`` total steps)."""
        start = time.time()
        epoch = self.state.epoch
        batches = iterate_batches(
            len(self.stories), self.train_config.batch_size, self.config.seed, epoch
        )
        generated_before = self.bank.generated
        sums = {"t2i": 0.0, "i2t": 0.0, "pt2i": 0.0, "total": 0.0}
        steps = 0
        while self.state.batch < len(batches):
            if max_steps is not None and self.state.step >= max_steps:
                break
            b = self.step(batches[self.state.batch])
            for key in sums:
                sums[key] += getattr(b, key)
            steps += 1
        finished = self.state.batch >= len(batches)
        if finished:
            self.state.epoch += 1
            self.state.batch = 0
        n = max(steps, 1)
        metrics = EpochMetrics(
            epoch=epoch,
            steps=steps,
            t2i=sums["t2i"] / n,
            i2t=sums["i2t"] / n,
            pt2i=sums["pt2i"] / n,
            total=sums["total"] / n,
            pseudo_texts=self.bank.generated - generated_before,
            seconds=time.time() - start,
        )
        logger.debug(
            "epoch %d: %d steps, mean total %.4f in %.3fs",
            epoch,
            steps,
            metrics.total,
            metrics.seconds,
        )
        return metrics

    def fit(self, epochs: int | None = None, max_steps: int | None = None) -> list[EpochMetrics]:
        epochs = self.train_config.epochs if epochs is None else epochs
        if max_steps is None and self.train_config.max_steps:
            max_steps = self.train_config.max_steps
        history = []
        while self.state.epoch < epochs:
            if max_steps is not None and self.state.step >= max_steps:
                break
            metrics = self.train_epoch(max_steps)
            metrics.image_accuracy = teacher_forced_accuracy(self.model, self.stories)
            history.append(metrics)
            logger.info(
                "✓ cmota: epoch %d done, loss %.4f, image-token accuracy %.3f",
                metrics.epoch,
                metrics.total,
                metrics.image_accuracy,
            )
        return history

    # -- persistence -------------------------------------------------------------------

    def to_checkpoint(self, extra_meta: dict[str, Any] | None = None) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for name, p in zip(self.names, self.params):
            tensors[f"model/{name}"] = p.data
        for name, m, v in zip(self.names, self.optimizer.m, self.optimizer.v):
            tensors[f"optim/m/{name}"] = m
            tensors[f"optim/v/{name}"] = v
        if self.offline is not None:
            for record in self.offline:
                tensors[f"offline/{record.story_id}/{record.frame}"] = record.tokens.tokens.copy()
        meta: dict[str, Any] = {
            "kind": "train",
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash,
            "counters": {
                "epoch": self.state.epoch,
                "batch": self.state.batch,
                "step": self.state.step,
                "optimizer_step": self.optimizer.step,
            },
            "rng": {"seed": self.config.seed, "batch_order": "default_rng([seed, epoch])"},
        }
        meta.update(extra_meta or {})
        return Checkpoint(meta=meta, tensors=tensors)

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        self.model.load_state_dict(ckpt.with_prefix("model"))
        m = ckpt.with_prefix("optim/m")
        v = ckpt.with_prefix("optim/v")
        try:
            pairs = list(zip(self.names, self.params))
            self.optimizer.m = [m[name].astype(p.data.dtype) for name, p in pairs]
            self.optimizer.v = [v[name].astype(p.data.dtype) for name, p in pairs]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks optimizer state for {exc}") from exc
        counters = ckpt.meta.get("counters", {})
        self.optimizer.step = int(counters.get("optimizer_step", 0))
        self.state = TrainState(
            epoch=int(counters.get("epoch", 0)),
            batch=int(counters.get("batch", 0)),
            step=int(counters.get("step", 0)),
        )
        offline = offline_bank_from_checkpoint(ckpt, self.config.model.t_text)
        if offline is not None:
            self.offline = offline


def offline_bank_from_checkpoint(ckpt: Checkpoint, t_text: int) -> PseudoTextBank | None:
    records = ckpt.with_prefix("offline")
    if not records:
        return None
    bank = PseudoTextBank()
    for key in sorted(records, key=lambda k: (k.rsplit("/", 1)[0], int(k.rsplit("/", 1)[1]))):
        story_id, frame = key.rsplit("/", 1)
        tokens = TokenSequence.text(records[key].tolist(), t_text)
        bank.add([PseudoText(tokens, story_id, int(frame), -1)])
    return bank


def train_epoch(
    stories: Sequence[EncodedStory], model: BiTransformer, config: RunConfig
) -> EpochMetrics:
    """One epoch from a fresh optimizer state (see :class:`Trainer` for resumable runs)."""
    return Trainer(model, config, stories).train_epoch()
