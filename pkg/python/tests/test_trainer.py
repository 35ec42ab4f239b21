"""Tests for the direction losses, pseudo-text augmentation and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import pytest

from cmota._config import ModelConfig, RunConfig, TrainConfig, WorldConfig
from cmota.checkpoint import decode_checkpoint, encode_checkpoint
from cmota.errors import NumericalError, PseudoTextError
from cmota.model import I2T, BiTransformer
from cmota.numerics import functional as F
from cmota.numerics.gradcheck import grad_check
from cmota.numerics.tensor import grad
from cmota.storage import LocalStorage
from cmota.trainer import (
    EncodedStory,
    LossBreakdown,
    PseudoTextBank,
    Trainer,
    iterate_batches,
    loss_i2t,
    loss_pt2i,
    loss_t2i,
    make_pseudo_texts,
    offline_augment,
    teacher_forced_accuracy,
    train_epoch,
)


@pytest.fixture
def cfg(oracle_model_config: ModelConfig) -> ModelConfig:
    return oracle_model_config


@pytest.fixture
def stories(cfg: ModelConfig, make_story) -> list[EncodedStory]:
    return [make_story(cfg, frames=3, seed=s, story_id=f"s{s}") for s in range(3)]


def _run_config(model: ModelConfig, **train) -> RunConfig:
    defaults = {"batch_size": 2, "epochs": 2, "lr": 1e-2, "grad_clip": 1.0}
    return RunConfig(
        world=WorldConfig(n_train=3, n_val=0, n_test=0),
        model=model,
        train=TrainConfig(**{**defaults, **train}),
    )


def _assert_same_params(a: BiTransformer, b: BiTransformer) -> None:
    for (name, p), q in zip(a.named_parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=name)


class TestLosses:
    def test_uniform_image_head(self, cfg: ModelConfig, stories) -> None:
        """A zero image head predicts uniformly: each frame costs T_image * ln K."""
        model = BiTransformer(cfg)
        model.image_head.weight.data[:] = 0.0
        model.image_head.bias.data[:] = 0.0
        loss = loss_t2i(stories[0], model)
        assert len(loss.per_frame) == 3
        for frame_loss in loss.per_frame:
            assert frame_loss == pytest.approx(16 * math.log(8), rel=1e-12)
        assert loss.total.item() == pytest.approx(3 * 16 * math.log(8), rel=1e-12)

    def test_uniform_text_head(self, cfg: ModelConfig, stories) -> None:
        """Text NLL runs through EOS: each frame costs len(text) * ln V."""
        model = BiTransformer(cfg)
        model.text_head.weight.data[:] = 0.0
        model.text_head.bias.data[:] = 0.0
        story = stories[1]
        loss = loss_i2t(story, model)
        v = cfg.text_vocab_size
        expected = [len(text) * math.log(v) for text in story.texts]
        np.testing.assert_allclose(loss.per_frame, expected, rtol=1e-12)

    def test_pseudo_equal_to_ground_truth(self, cfg: ModelConfig, stories) -> None:
        """With pseudo-texts equal to the sentences, L_pt2i equals L_t2i."""
        model = BiTransformer(cfg)
        story = stories[0]
        pseudo = loss_pt2i(story, story.texts, model).total.item()
        assert pseudo == loss_t2i(story, model).total.item()

    def test_frame_order_matters_only_through_memory(self, cfg: ModelConfig, stories) -> None:
        """Reordering frames only reorders per-frame losses unless memory links the frames."""
        story = stories[0]
        order = (2, 0, 1)
        permuted = EncodedStory(
            story.story_id,
            tuple(story.texts[i] for i in order),
            tuple(story.images[i] for i in order),
        )
        plain = BiTransformer(dataclasses.replace(cfg, topology="none", awm_enabled=False), seed=3)
        for loss in (loss_t2i, loss_i2t):
            base, moved = loss(story, plain), loss(permuted, plain)
            assert moved.per_frame == tuple(base.per_frame[i] for i in order)
            assert moved.total.item() == pytest.approx(base.total.item(), rel=1e-12)

        model = BiTransformer(cfg, seed=3)
        base, moved = loss_t2i(story, model), loss_t2i(permuted, model)
        assert abs(moved.total.item() - base.total.item()) > 1e-6
        assert moved.per_frame != tuple(base.per_frame[i] for i in order)

    def test_missing_pseudo_texts(self, cfg: ModelConfig, stories) -> None:
        model = BiTransformer(cfg)
        with pytest.raises(PseudoTextError):
            loss_pt2i(stories[0], None, model)
        with pytest.raises(PseudoTextError, match="frame 3"):
            loss_pt2i(stories[0], stories[0].texts[:2], model)

    def test_pseudo_text_gradient_stops_at_caption(self, cfg: ModelConfig, stories) -> None:
        """L_pt2i gradients equal L_t2i gradients on a story whose sentences are the captions."""
        model = BiTransformer(cfg)
        story = stories[2]
        captions = make_pseudo_texts(story, model, epoch=0)
        assert [c.frame for c in captions] == [0, 1, 2]
        swapped = EncodedStory(story.story_id, tuple(c.tokens for c in captions), story.images)
        params = model.parameters()
        via_pseudo = grad(loss_pt2i(story, captions, model).total, params)
        via_text = grad(loss_t2i(swapped, model).total, params)
        for a, b in zip(via_pseudo, via_text):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_full_model_gradients(self, cfg: ModelConfig, stories) -> None:
        """Reverse-mode gradients of the joint loss match central differences."""
        model = BiTransformer(cfg)
        story = stories[0]

        def objective():
            return F.add(loss_t2i(story, model).total, F.mul(loss_i2t(story, model).total, 0.5))

        assert grad_check(objective, model.parameters(), samples_per_param=2) < 1e-5


class TestBatches:
    def test_every_story_once_per_epoch(self) -> None:
        batches = iterate_batches(7, 3, seed=0, epoch=0)
        assert [len(b) for b in batches] == [3, 3, 1]
        assert sorted(np.concatenate(batches).tolist()) == list(range(7))

    def test_order_depends_on_seed_and_epoch(self) -> None:
        a = np.concatenate(iterate_batches(20, 4, seed=0, epoch=0))
        np.testing.assert_array_equal(a, np.concatenate(iterate_batches(20, 4, seed=0, epoch=0)))
        assert not np.array_equal(a, np.concatenate(iterate_batches(20, 4, seed=0, epoch=1)))
        assert not np.array_equal(a, np.concatenate(iterate_batches(20, 4, seed=1, epoch=0)))


class TestStep:
    def test_components_add_up(self, cfg: ModelConfig, stories) -> None:
        """Batch losses are story sums over batch frames; the total is the objective stepped on."""
        model = BiTransformer(cfg)
        config = _run_config(cfg, lambda1=0.7, lambda2=0.3, augmentation="online", warmup_epochs=0)
        trainer = Trainer(model, config, stories)
        batch = [0, 2]
        parts = {"t2i": 0.0, "i2t": 0.0, "pt2i": 0.0}
        for i in batch:
            captions = make_pseudo_texts(stories[i], model, epoch=0)
            parts["t2i"] += loss_t2i(stories[i], model).total.item() / 6
            parts["i2t"] += loss_i2t(stories[i], model).total.item() / 6
            parts["pt2i"] += loss_pt2i(stories[i], captions, model).total.item() / 6
        objective = parts["t2i"] + 0.7 * parts["i2t"] + 0.3 * parts["pt2i"]
        breakdown = trainer.step(batch)
        assert breakdown.frames == 6
        assert breakdown.t2i == pytest.approx(parts["t2i"], rel=1e-12)
        assert breakdown.i2t == pytest.approx(parts["i2t"], rel=1e-12)
        assert breakdown.pt2i == pytest.approx(parts["pt2i"], rel=1e-12)
        assert breakdown.pt2i > 0
        assert breakdown.total == pytest.approx(objective, rel=1e-12)
        assert len(breakdown.per_frame["t2i"]) == 6
        assert trainer.state.step == 1

    def test_zero_lambdas_match_text_to_image_only(self, cfg: ModelConfig, stories) -> None:
        """lambda1 = lambda2 = 0 follows the same parameter trajectory as t2i-only training."""
        joint = BiTransformer(cfg, seed=1)
        alone = BiTransformer(cfg, seed=1)
        a = Trainer(joint, _run_config(cfg, lambda1=0.0, lambda2=0.0), stories)
        b = Trainer(alone, _run_config(cfg, bidirectional=False), stories)
        for batch in ([0, 1], [2], [1, 2]):
            ra, rb = a.step(batch), b.step(batch)
            assert ra.t2i == rb.t2i
            assert ra.i2t > 0 and rb.i2t == 0
        _assert_same_params(joint, alone)

    def test_alternating_updates(self, cfg: ModelConfig, stories) -> None:
        """Alternation applies one text-to-image and one image-to-text update per batch."""
        model = BiTransformer(cfg)
        trainer = Trainer(model, _run_config(cfg, alternation="alternate"), stories)
        breakdown = trainer.step([0, 1])
        assert trainer.optimizer.step == 2
        assert trainer.state.step == 1
        assert breakdown.i2t > 0
        assert breakdown.total == pytest.approx(breakdown.t2i + breakdown.i2t, rel=1e-12)

    def test_total_must_match_components(self) -> None:
        breakdown = LossBreakdown(t2i=1.0, i2t=2.0, pt2i=4.0, total=3.0)
        with pytest.raises(NumericalError, match="components"):
            breakdown.check(lambda1=0.5, lambda2=0.5)
        breakdown.total = 4.0
        breakdown.check(lambda1=0.5, lambda2=0.5)

    def test_metrics_records(self, tmp_path: Path, cfg: ModelConfig, stories) -> None:
        storage = LocalStorage(tmp_path)
        model = BiTransformer(cfg)
        trainer = Trainer(model, _run_config(cfg), stories, storage=storage)
        trainer.train_epoch()
        records = storage.read_records("metrics.ndjson")
        assert [r["step"] for r in records] == [1, 2]
        expected = {"l_t2i", "l_i2t", "l_pt2i", "l_total", "grad_norm", "lr", "tokens_per_s"}
        assert expected <= set(records[0])

    def test_non_finite_loss(self, cfg: ModelConfig, stories, caplog) -> None:
        """A NaN aborts the step with diagnostics and hands the trainer to the failure hook."""
        model = BiTransformer(cfg)
        model.image_embed.table.data[:] = np.nan
        seen = []
        trainer = Trainer(model, _run_config(cfg), stories, failure_fn=lambda t, e: seen.append(e))
        with caplog.at_level(logging.WARNING, logger="cmota"):
            with pytest.raises(NumericalError) as excinfo:
                trainer.step([0])
        assert excinfo.value.diagnostics["step"] == 0
        assert seen == [excinfo.value]
        assert "non-finite" in caplog.text
        assert trainer.state.step == 0

    def test_checkpoint_hook(self, cfg: ModelConfig, stories) -> None:
        calls = []
        config = _run_config(cfg, batch_size=1, checkpoint_every=2)
        trainer = Trainer(
            BiTransformer(cfg),
            config,
            stories,
            checkpoint_fn=lambda t: calls.append(t.state.step),
        )
        trainer.train_epoch()
        assert calls == [2]


class TestAugmentation:
    def test_warmup_gates_online_pseudo_texts(self, cfg: ModelConfig, stories) -> None:
        """Online pseudo-texts start at the first epoch after warmup."""
        config = _run_config(cfg, augmentation="online", warmup_epochs=2, epochs=3)
        trainer = Trainer(BiTransformer(cfg), config, stories)
        assert [trainer.augmentation_active(e) for e in range(4)] == [False, False, True, True]
        history = trainer.fit()
        assert [m.pseudo_texts for m in history] == [0, 0, 9]
        assert history[0].pt2i == history[1].pt2i == 0.0
        assert history[2].pt2i > 0
        assert trainer.bank.epochs() == {2}

    def test_online_regenerates_every_epoch(self, cfg: ModelConfig, stories) -> None:
        config = _run_config(cfg, augmentation="online", warmup_epochs=0, epochs=3)
        trainer = Trainer(BiTransformer(cfg), config, stories)
        trainer.fit()
        counts = trainer.bank.per_image_counts()
        assert len(counts) == 9
        assert set(counts.values()) == {3}

    def test_bank_keeps_only_the_newest_caption(self, cfg: ModelConfig, stories) -> None:
        """Regenerating every epoch replaces captions instead of accumulating them."""
        config = _run_config(cfg, augmentation="online", warmup_epochs=0, epochs=3)
        trainer = Trainer(BiTransformer(cfg), config, stories)
        history = trainer.fit()
        assert [m.pseudo_texts for m in history] == [9, 9, 9]
        assert len(trainer.bank) == 9
        assert trainer.bank.generated == 27
        assert trainer.bank.epochs() == {2}
        newest = make_pseudo_texts(stories[1], trainer.model, epoch=3)
        trainer.bank.add(newest)
        assert len(trainer.bank) == 9
        assert trainer.bank.latest("s1", 3) == [p.tokens for p in newest]
        assert {p.epoch for p in trainer.bank if p.story_id == "s1"} == {3}
        assert trainer.bank.epochs() == {2, 3}
        assert trainer.bank.latest("s1", 4) is None

    def test_offline_generates_once(self, cfg: ModelConfig, stories) -> None:
        captioner = BiTransformer(cfg, seed=5)
        bank = offline_augment(stories, captioner, cfg)
        counts = bank.per_image_counts()
        assert len(counts) == 9
        assert set(counts.values()) == {1}

        config = _run_config(cfg, augmentation="offline", epochs=3)
        trainer = Trainer(BiTransformer(cfg), config, stories, offline=bank)
        history = trainer.fit()
        assert all(m.pt2i > 0 for m in history)
        assert len(trainer.bank) == 0
        assert len(bank) == 9

    def test_offline_needs_a_bank(self, cfg: ModelConfig, stories) -> None:
        config = _run_config(cfg, augmentation="offline")
        with pytest.raises(PseudoTextError):
            Trainer(BiTransformer(cfg), config, stories)
        trainer = Trainer(BiTransformer(cfg), config, stories, offline=PseudoTextBank())
        with pytest.raises(PseudoTextError):
            trainer.step([0])


class TestDeterminism:
    def test_same_seed_same_trajectory(self, cfg: ModelConfig, stories) -> None:
        cfg = dataclasses.replace(cfg, dropout=0.1)
        a, b = BiTransformer(cfg), BiTransformer(cfg)
        ha = Trainer(a, _run_config(cfg), stories).fit()
        hb = Trainer(b, _run_config(cfg), stories).fit()
        assert [m.total for m in ha] == [m.total for m in hb]
        _assert_same_params(a, b)

    def test_workers_do_not_change_the_result(self, cfg: ModelConfig, stories) -> None:
        a, b = BiTransformer(cfg), BiTransformer(cfg)
        Trainer(a, _run_config(cfg, workers=1), stories).fit(epochs=1)
        Trainer(b, _run_config(cfg, workers=2), stories).fit(epochs=1)
        _assert_same_params(a, b)

    @pytest.mark.parametrize("stop_after", [2, 3])
    def test_resume_matches_uninterrupted(self, cfg: ModelConfig, stories, stop_after: int) -> None:
        """Stopping, checkpointing and resuming lands on the same parameters and optimizer."""
        cfg = dataclasses.replace(cfg, dropout=0.1)
        config = _run_config(cfg, batch_size=1, augmentation="online", warmup_epochs=1)
        full_model = BiTransformer(cfg)
        full = Trainer(full_model, config, stories)
        full.fit()

        first = Trainer(BiTransformer(cfg), config, stories)
        first.fit(max_steps=stop_after)
        blob = encode_checkpoint(first.to_checkpoint())

        resumed_model = BiTransformer(cfg, seed=99)
        resumed = Trainer(resumed_model, config, stories)
        resumed.load_checkpoint(decode_checkpoint(blob))
        assert resumed.state == first.state
        resumed.fit()

        assert resumed.state == full.state
        assert resumed.optimizer.step == full.optimizer.step
        _assert_same_params(resumed_model, full_model)
        for m_a, m_b in zip(resumed.optimizer.m, full.optimizer.m):
            np.testing.assert_array_equal(m_a, m_b)


class TestHelpers:
    def test_accuracy_is_a_fraction(self, cfg: ModelConfig, stories) -> None:
        model = BiTransformer(cfg)
        for direction in ("t2i", I2T):
            acc = teacher_forced_accuracy(model, stories, direction)
            assert 0.0 <= acc <= 1.0
        assert model.training

    def test_train_epoch_function(self, cfg: ModelConfig, stories) -> None:
        metrics = train_epoch(stories, BiTransformer(cfg), _run_config(cfg))
        assert metrics.epoch == 0
        assert metrics.steps == 2

    def test_training_lowers_the_loss(self, cfg: ModelConfig, stories) -> None:
        model = BiTransformer(cfg)
        before = sum(loss_t2i(s, model).total.item() for s in stories)
        Trainer(model, _run_config(cfg, epochs=15, lr=3e-2), stories).fit()
        after = sum(loss_t2i(s, model).total.item() for s in stories)
        assert after < before
