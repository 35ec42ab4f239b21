"""pytest plugin: acceptance-run gating plus shared cmota fixtures.

Enable acceptance experiments on the command line or in pyproject.toml::

    [tool.pytest.ini_options]
    cmota_acceptance = "true"
"""

from __future__ import annotations

from typing import Any

import pytest

from cmota._config import ModelConfig, RunConfig, TrainConfig, WorldConfig
from cmota.storyworld import StoryDataset, make_splits, template_corpus
from cmota.tokenizer import build_vocab

_TRUE = ("1", "true", "yes", "on")


def pytest_addoption(parser: pytest.Parser) -> None:
    group = parser.getgroup("cmota", "cmota experiments")
    group.addoption(
        "--cmota-acceptance",
        action="store_true",
        default=None,
        help="Run acceptance experiments (overfit, memory and augmentation ablations)",
    )
    parser.addini(
        "cmota_acceptance",
        type="string",
        default="false",
        help="Run acceptance experiments (overridden by --cmota-acceptance)",
    )


def acceptance_enabled(config: pytest.Config) -> bool:
    flag = config.getoption("--cmota-acceptance", None)
    if flag is not None:
        return bool(flag)
    return str(config.getini("cmota_acceptance")).strip().lower() in _TRUE


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line(
        "markers",
        "acceptance: long-running experiment reproductions (enable with --cmota-acceptance)",
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[Any]) -> None:
    if acceptance_enabled(config):
        return
    skip = pytest.mark.skip(reason="acceptance experiment; pass --cmota-acceptance to run")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_world() -> WorldConfig:
    """Default rosters with small splits."""
    return WorldConfig(n_train=8, n_val=2, n_test=4)


@pytest.fixture
def tiny_dataset(tiny_world: WorldConfig) -> StoryDataset:
    world = tiny_world
    return make_splits(world.n_train, world.n_val, world.n_test, seed=0, world=world)


@pytest.fixture
def desk_config(tmp_path: Any, tiny_world: WorldConfig) -> RunConfig:
    """Desk preset with a resolved vocabulary size, tiny splits and a temporary run directory."""
    vocab = build_vocab(template_corpus(tiny_world))
    return RunConfig(
        world=tiny_world,
        model=ModelConfig(text_vocab_size=len(vocab)),
        train=TrainConfig(epochs=1, batch_size=4),
        out=str(tmp_path / "run"),
    ).validate()


@pytest.fixture
def oracle_model_config(tiny_world: WorldConfig) -> ModelConfig:
    """A d=8 float64 model without dropout, for oracle and gradient checks."""
    vocab = build_vocab(template_corpus(tiny_world))
    return ModelConfig(
        layers=1,
        hidden=8,
        heads=2,
        t_text=16,
        t_image=16,
        text_vocab_size=len(vocab),
        codebook_size=8,
        dropout=0.0,
        precision="float64",
        init_std=0.5,
    )
