"""
Shared fixtures for the cmota test suite.

World, dataset and config fixtures come from the ``cmota.plugin`` pytest
plugin; the helpers here build small random stories for oracle tests.
"""

import logging

import numpy as np
import pytest

from cmota.tokenizer import EOS, TokenSequence
from cmota.trainer import EncodedStory

pytest_plugins = ["pytester", "cmota.plugin"]


@pytest.fixture(autouse=True)
def _restore_cmota_logger():
    """The CLI installs its own handler; put the package logger back after each test."""
    logger = logging.getLogger("cmota")
    handlers, propagate, level = list(logger.handlers), logger.propagate, logger.level
    yield
    logger.handlers[:] = handlers
    logger.propagate = propagate
    logger.setLevel(level)


@pytest.fixture
def make_story():
    """Factory for random encoded stories matching a ``ModelConfig``.

    Texts are 1..4 random words followed by EOS; images are full
    ``t_image`` grids of random codebook indices.
    """

    def factory(config, frames=3, seed=0, story_id="story"):
        rng = np.random.default_rng(seed)
        texts, images = [], []
        for _ in range(frames):
            words = rng.integers(4, config.text_vocab_size, size=int(rng.integers(1, 5)))
            texts.append(TokenSequence.text([*words.tolist(), EOS], config.t_text))
            codes = rng.integers(0, config.codebook_size, config.t_image)
            images.append(TokenSequence.image(codes))
        return EncodedStory(story_id, tuple(texts), tuple(images))

    return factory


TINY_RUN_TOML = """\
[world]
n_train = 6
n_val = 1
n_test = 2

[model]
layers = 1
hidden = 16
heads = 2
codebook_size = 16
dropout = 0.0

[train]
epochs = 1
batch_size = 3

[eval]
max_stories = 2
seeds = [0]
"""


@pytest.fixture
def tiny_run_toml(tmp_path):
    """A TOML config small enough to run every CLI command in seconds."""
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_RUN_TOML)
    return path
