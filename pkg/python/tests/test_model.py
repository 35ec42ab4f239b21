"""Tests for the bi-directional transformer: layout, masking, decoding and parameter accounting."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from cmota._config import ModelConfig, load_config
from cmota.errors import ConfigError, DimensionError
from cmota.model import (
    I2T,
    T2I,
    BiTransformer,
    count_trainables,
    generate_image_tokens,
    generate_text_tokens,
    parameter_breakdown,
    parameter_count,
    prefix_lm_mask,
)
from cmota.numerics.tensor import Tensor
from cmota.tokenizer import EOS, SOI, SOS, TokenSequence


@pytest.fixture
def model(oracle_model_config: ModelConfig) -> BiTransformer:
    return BiTransformer(oracle_model_config, seed=0)


def _text(*words: int) -> TokenSequence:
    return TokenSequence.text([*words, EOS], 16)


def _image(seed: int, k: int = 8) -> TokenSequence:
    return TokenSequence.image(np.random.default_rng(seed).integers(0, k, 16))


class TestPrefixMask:
    def test_small_layout(self) -> None:
        mask = prefix_lm_mask(2, 4)
        expected = [
            [True, True, False, False],
            [True, True, False, False],
            [True, True, True, False],
            [True, True, True, True],
        ]
        assert mask.tolist() == expected

    def test_no_source_is_causal(self) -> None:
        np.testing.assert_array_equal(prefix_lm_mask(0, 5), np.tril(np.ones((5, 5), dtype=bool)))


class TestEmbed:
    def test_t2i_layout(self, model: BiTransformer) -> None:
        emb = model.embed(_text(5, 6), [1, 2], T2I)
        assert emb.n_source == 4
        assert emb.modalities == ("txt",) * 4 + ("img",) * 3
        assert emb.text_mask.tolist() == [True] * 4 + [False] * 3

    def test_i2t_layout(self, model: BiTransformer) -> None:
        emb = model.embed(_image(0), [7, 8], I2T)
        assert emb.n_source == 17
        assert emb.length == 20
        assert emb.modalities == ("img",) * 17 + ("txt",) * 3

    def test_sum_of_token_position_segment(self, model: BiTransformer) -> None:
        """Each row is its token embedding plus position plus source/target segment."""
        emb = model.embed(_text(5), [4], T2I)
        text, image = model.text_embed.table.data, model.image_embed.table.data
        pos, seg = model.position.table.data, model.segment.table.data
        rows = [text[SOS], text[5], text[EOS], text[SOI], image[4]]
        segments = [0, 0, 0, 1, 1]
        expected = np.stack([r + pos[i] + seg[s] for i, (r, s) in enumerate(zip(rows, segments))])
        np.testing.assert_allclose(emb.x.data, expected, atol=1e-15)

    def test_segments_follow_direction(self, model: BiTransformer) -> None:
        """SOI is a target-segment token in t2i but a source-segment token in i2t."""
        t2i = model.embed(_text(5), [], T2I)
        i2t = model.embed(_image(1), [], I2T)
        text = model.text_embed.table.data
        pos, seg = model.position.table.data, model.segment.table.data
        np.testing.assert_allclose(t2i.x.data[3], text[SOI] + pos[3] + seg[1], atol=1e-15)
        np.testing.assert_allclose(i2t.x.data[0], text[SOI] + pos[0] + seg[0], atol=1e-15)

    def test_wrong_source_modality(self, model: BiTransformer) -> None:
        with pytest.raises(DimensionError):
            model.embed(_image(0), [], T2I)
        with pytest.raises(DimensionError):
            model.embed(_text(5), [], I2T)

    def test_prefix_too_long(self, model: BiTransformer) -> None:
        with pytest.raises(DimensionError):
            model.embed(_text(5), np.zeros(17, dtype=int), T2I)

    def test_unknown_direction(self, model: BiTransformer) -> None:
        with pytest.raises(ValueError):
            model.embed(_text(5), [], "t2t")


class TestForward:
    def test_logit_shapes(self, model: BiTransformer, oracle_model_config: ModelConfig) -> None:
        cfg = oracle_model_config
        logits, hidden = model(model.embed(_text(5, 6), _image(0).tokens[:-1], T2I))
        assert logits.shape == (16, cfg.codebook_size)
        assert len(hidden.inputs) == cfg.layers
        logits, _ = model(model.embed(_image(0), [5, 6, EOS], I2T))
        assert logits.shape == (4, cfg.text_vocab_size)

    def test_empty_prefix(self, model: BiTransformer, oracle_model_config: ModelConfig) -> None:
        """An empty target prefix still predicts the first target token."""
        logits, _ = model(model.embed(_text(5), [], T2I))
        assert logits.shape == (1, oracle_model_config.codebook_size)
        logits, _ = model(model.embed(_image(0), [], I2T))
        assert logits.shape == (1, oracle_model_config.text_vocab_size)

    def test_targets_are_causal(self, model: BiTransformer) -> None:
        """Changing target token k leaves the predictions at rows <= k unchanged."""
        text = _text(5, 6, 7)
        prefix = _image(2).tokens[:-1].copy()
        bundle = {1: Tensor(np.random.default_rng(3).normal(size=(2, 8)))}
        base, _ = model(model.embed(text, prefix, T2I), bundle)
        for k in (0, 6, 14):
            changed = prefix.copy()
            changed[k] = (changed[k] + 1) % 8
            logits, _ = model(model.embed(text, changed, T2I), bundle)
            np.testing.assert_allclose(logits.data[: k + 1], base.data[: k + 1], rtol=0, atol=1e-12)
            assert not np.allclose(logits.data[k + 1 :], base.data[k + 1 :])

    def test_source_is_bidirectional(self, model: BiTransformer) -> None:
        """The first source position sees later source tokens."""
        _, a = model(model.embed(_text(5, 6, 7), [], T2I))
        _, b = model(model.embed(_text(5, 6, 8), [], T2I))
        assert not np.allclose(a.output.data[0], b.output.data[0])

    def test_memory_bundle_changes_fusion_layer(self, model: BiTransformer) -> None:
        emb = model.embed(_text(5, 6), [1, 2], T2I)
        plain, _ = model(emb)
        none_bundle, _ = model(emb, {1: None})
        with_memory, _ = model(emb, {1: Tensor(np.ones((1, 8)))})
        np.testing.assert_array_equal(plain.data, none_bundle.data)
        assert not np.allclose(plain.data, with_memory.data)

    def test_no_fusion_layer_ignores_bundle(self, oracle_model_config: ModelConfig) -> None:
        model = BiTransformer(dataclasses.replace(oracle_model_config, topology="none"))
        emb = model.embed(_text(5), [1], T2I)
        plain, _ = model(emb)
        bundled, _ = model(emb, {1: Tensor(np.ones((1, 8)))})
        np.testing.assert_array_equal(plain.data, bundled.data)
        assert model.memory == {}

    def test_capture_fuse_weights(self, model: BiTransformer) -> None:
        capture: dict[str, list[np.ndarray]] = {}
        model(model.embed(_text(5), [1], T2I), {1: Tensor(np.ones((1, 8)))}, capture=capture)
        (weights,) = capture["fuse.1"]
        assert weights.shape == (2, 5, 6)

    def test_same_seed_same_model(self, oracle_model_config: ModelConfig) -> None:
        a = BiTransformer(oracle_model_config, seed=4)
        b = BiTransformer(oracle_model_config, seed=4)
        assert a.state_dict().keys() == b.state_dict().keys()
        for name, value in a.state_dict().items():
            np.testing.assert_array_equal(value, b.state_dict()[name])
        emb_a, emb_b = a.embed(_text(5), [1], T2I), b.embed(_text(5), [1], T2I)
        np.testing.assert_array_equal(a(emb_a)[0].data, b(emb_b)[0].data)

    def test_load_state_dict(self, oracle_model_config: ModelConfig) -> None:
        a = BiTransformer(oracle_model_config, seed=0)
        b = BiTransformer(oracle_model_config, seed=1)
        b.load_state_dict(a.state_dict())
        emb = _text(5, 6)
        np.testing.assert_array_equal(
            a(a.embed(emb, [], T2I))[0].data, b(b.embed(emb, [], T2I))[0].data
        )

    def test_dropout_only_in_training(self, oracle_model_config: ModelConfig) -> None:
        model = BiTransformer(dataclasses.replace(oracle_model_config, dropout=0.5))
        text = _text(5, 6)
        clean, _ = model(model.embed(text, [1], T2I))
        noisy, _ = model(
            model.embed(text, [1], T2I, rng=np.random.default_rng(0)), rng=np.random.default_rng(1)
        )
        assert not np.allclose(clean.data, noisy.data)
        model.eval()
        assert not model.blocks[0].training
        evald, _ = model(
            model.embed(text, [1], T2I, rng=np.random.default_rng(0)), rng=np.random.default_rng(1)
        )
        np.testing.assert_array_equal(clean.data, evald.data)

    def test_unresolved_vocabulary(self) -> None:
        with pytest.raises(ConfigError):
            BiTransformer(ModelConfig())


class TestDecoding:
    def test_image_length(self, model: BiTransformer) -> None:
        tokens, hidden = model.decode_image(_text(5, 6))
        assert len(tokens) == 16
        assert tokens.tokens.max() < 8
        assert hidden.output.shape == (4 + 16, 8)

    def test_final_pass_matches_teacher_forcing(self, model: BiTransformer) -> None:
        """The returned hidden state is the forward pass over the generated prefix."""
        text = _text(5, 6)
        tokens, hidden = model.decode_image(text)
        _, forced = model(model.embed(text, tokens.tokens[:-1], T2I))
        np.testing.assert_allclose(hidden.output.data, forced.output.data, atol=1e-12)

    def test_text_length_bounded(self, model: BiTransformer) -> None:
        tokens, _ = model.decode_text(_image(0))
        assert 1 <= len(tokens) <= 16
        assert EOS not in tokens.tokens[:-1].tolist()
        assert len(model.decode_text(_image(0), max_len=3)[0]) <= 3

    def test_greedy_is_deterministic(self, model: BiTransformer) -> None:
        assert generate_image_tokens(model, _text(5)) == generate_image_tokens(model, _text(5))
        assert generate_text_tokens(model, _image(3)) == model.decode_text(_image(3))[0]


class TestParameterCount:
    @pytest.mark.parametrize("topology", ["none", "partial_level", "all_level"])
    @pytest.mark.parametrize("awm", [True, False])
    @pytest.mark.parametrize("slots", [1, 3])
    def test_closed_form_matches_model(
        self, oracle_model_config: ModelConfig, topology: str, awm: bool, slots: int
    ) -> None:
        config = dataclasses.replace(
            oracle_model_config, layers=2, topology=topology, awm_enabled=awm, memory_slots=slots
        )
        assert parameter_count(config) == count_trainables(BiTransformer(config))

    def test_desk_model(self, desk_config) -> None:
        model = BiTransformer(desk_config.model)
        assert parameter_count(desk_config.model) == count_trainables(model)

    def test_breakdown_parts(self) -> None:
        config = ModelConfig(layers=2, hidden=16, heads=2, text_vocab_size=20, codebook_size=10)
        parts = parameter_breakdown(config)
        assert parts["embeddings"] == (20 + 10 + 34 + 2) * 16
        assert parts["heads"] == 17 * 30
        assert parts["final_norm"] == 32

    def test_paper_scale(self) -> None:
        """The large preset lands within 2% of the reference 95.8M trainables."""
        count = parameter_count(load_config(preset="paper").model)
        assert abs(count - 95.8e6) / 95.8e6 < 0.02
